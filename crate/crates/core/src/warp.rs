//! Warping functions `v(p, w) = p + E_w(p)` built from displacement vectors on
//! an interior anchor grid.
//!
//! `E_w` interpolates each displacement coordinate bilinearly over the anchor
//! grid padded with zero displacement on the boundary of the unit square, so
//! every warp is the identity on the boundary and `v` is linear in `w`.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{Image, Point};

/// Interior equidistant anchor lattice `a_j = j/(mw1+1)`, `b_k = k/(mw2+1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AnchorGrid {
    mw1: usize,
    mw2: usize,
}

impl AnchorGrid {
    pub fn new(mw1: usize, mw2: usize) -> Result<Self> {
        if mw1 == 0 || mw2 == 0 {
            return Err(Error::InvalidDimension(format!(
                "anchor grid must be at least 1x1, got {mw1}x{mw2}"
            )));
        }
        Ok(AnchorGrid { mw1, mw2 })
    }

    pub fn rows(&self) -> usize {
        self.mw1
    }

    pub fn cols(&self) -> usize {
        self.mw2
    }

    /// Number of anchors.
    pub fn anchors(&self) -> usize {
        self.mw1 * self.mw2
    }

    /// Length `q = 2 * mw1 * mw2` of a vectorized displacement grid.
    pub fn dim(&self) -> usize {
        2 * self.anchors()
    }

    pub fn anchor_point(&self, a: usize) -> Point {
        let (j, k) = (a / self.mw2, a % self.mw2);
        Point::new(
            (j + 1) as f64 / (self.mw1 + 1) as f64,
            (k + 1) as f64 / (self.mw2 + 1) as f64,
        )
    }

    pub fn anchor_points(&self) -> Vec<Point> {
        (0..self.anchors()).map(|a| self.anchor_point(a)).collect()
    }

    /// Bilinear weights of the anchors supporting `p`.
    pub fn basis(&self, p: Point) -> WarpBasis {
        let mut basis = WarpBasis::default();
        if !(0.0..=1.0).contains(&p.s) || !(0.0..=1.0).contains(&p.t) {
            return basis;
        }
        let (i0, fs) = padded_cell(p.s, self.mw1);
        let (k0, ft) = padded_cell(p.t, self.mw2);
        for (i, wi) in [(i0, 1.0 - fs), (i0 + 1, fs)] {
            if wi == 0.0 || i == 0 || i > self.mw1 {
                continue;
            }
            for (k, wk) in [(k0, 1.0 - ft), (k0 + 1, ft)] {
                if wk == 0.0 || k == 0 || k > self.mw2 {
                    continue;
                }
                basis.push((i - 1) * self.mw2 + (k - 1), wi * wk);
            }
        }
        basis
    }
}

/// Cell of the zero-padded grid (nodes `0..=n+1`) containing `x in [0, 1]`.
#[inline]
fn padded_cell(x: f64, n: usize) -> (usize, f64) {
    let mut u = x * (n + 1) as f64;
    // snap anchor coordinates so nodes get weight exactly one
    let r = u.round();
    if (u - r).abs() < 1e-12 {
        u = r;
    }
    let i0 = (u.floor() as usize).min(n);
    (i0, u - i0 as f64)
}

/// Up to four `(anchor, weight)` pairs.
#[derive(Debug, Clone, Copy, Default)]
pub struct WarpBasis {
    entries: [(usize, f64); 4],
    len: usize,
}

impl WarpBasis {
    fn push(&mut self, anchor: usize, weight: f64) {
        self.entries[self.len] = (anchor, weight);
        self.len += 1;
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn as_slice(&self) -> &[(usize, f64)] {
        &self.entries[..self.len]
    }

    pub fn total_weight(&self) -> f64 {
        self.as_slice().iter().map(|e| e.1).sum()
    }
}

/// Free-function form of [`AnchorGrid::basis`]. The Jacobian of `v` with
/// respect to anchor `a`'s s-displacement is `(weight, 0)` and with respect to
/// its t-displacement `(0, weight)`.
pub fn warp_basis(grid: &AnchorGrid, p: Point) -> WarpBasis {
    grid.basis(p)
}

/// Displacement vectors on an anchor grid, vectorized as all s-displacements
/// (row-major) followed by all t-displacements (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementGrid {
    grid: AnchorGrid,
    w: Vec<f64>,
}

/// Outcome of [`DisplacementGrid::inverse`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseWarp {
    pub point: Point,
    pub converged: bool,
    pub iterations: usize,
}

pub const INVERSE_MAX_ITERS: usize = 20;
pub const INVERSE_TOL: f64 = 1e-8;

impl DisplacementGrid {
    pub fn zeros(grid: AnchorGrid) -> Self {
        DisplacementGrid {
            grid,
            w: vec![0.0; grid.dim()],
        }
    }

    pub fn from_vec(grid: AnchorGrid, w: Vec<f64>) -> Result<Self> {
        if w.len() != grid.dim() {
            return Err(Error::DimensionMismatch {
                expected: grid.dim(),
                got: w.len(),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(
                "displacements must be finite".into(),
            ));
        }
        Ok(DisplacementGrid { grid, w })
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.w
    }

    /// Displacement `(ds, dt)` at anchor `a`.
    pub fn anchor(&self, a: usize) -> (f64, f64) {
        (self.w[a], self.w[self.grid.anchors() + a])
    }

    pub fn max_abs(&self) -> f64 {
        self.w.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Interpolated displacement `E_w(p)`.
    #[inline]
    pub fn displacement(&self, p: Point) -> (f64, f64) {
        let na = self.grid.anchors();
        self.grid
            .basis(p)
            .as_slice()
            .iter()
            .fold((0.0, 0.0), |(ds, dt), &(a, wt)| {
                (ds + wt * self.w[a], dt + wt * self.w[na + a])
            })
    }

    /// `v(p, w) = p + E_w(p)`.
    #[inline]
    pub fn eval(&self, p: Point) -> Point {
        let (ds, dt) = self.displacement(p);
        Point::new(p.s + ds, p.t + dt)
    }

    /// Fixed-point inversion `u <- p - E_w(u)` starting at `u = p`.
    pub fn inverse(&self, p: Point) -> InverseWarp {
        let mut u = p;
        for it in 1..=INVERSE_MAX_ITERS {
            let (ds, dt) = self.displacement(u);
            let next = Point::new(p.s - ds, p.t - dt);
            let step = (next.s - u.s).abs().max((next.t - u.t).abs());
            u = next;
            if step < INVERSE_TOL {
                return InverseWarp {
                    point: u,
                    converged: true,
                    iterations: it,
                };
            }
        }
        InverseWarp {
            point: u,
            converged: false,
            iterations: INVERSE_MAX_ITERS,
        }
    }

    /// Warped template `theta(v(s_j, t_k, w))` on the template's lattice.
    pub fn resample(&self, template: &Image) -> Image {
        let lattice = *template.lattice();
        let values = (0..lattice.len())
            .into_par_iter()
            .map(|r| template.sample(self.eval(lattice.point_at(r))))
            .collect();
        Image::new(lattice, values).expect("lattice-sized buffer")
    }

    /// Number of cells of the padded anchor grid whose bilinear image has a
    /// non-positive Jacobian determinant at some corner.
    pub fn fold_count(&self) -> usize {
        let (n1, n2) = (self.grid.rows() + 2, self.grid.cols() + 2);
        let node = |i: usize, k: usize| {
            let p = Point::new(i as f64 / (n1 - 1) as f64, k as f64 / (n2 - 1) as f64);
            self.eval(p)
        };
        let mut folds = 0;
        for i in 0..n1 - 1 {
            for k in 0..n2 - 1 {
                let c = [
                    [node(i, k), node(i, k + 1)],
                    [node(i + 1, k), node(i + 1, k + 1)],
                ];
                let folded = [(0, 0), (0, 1), (1, 0), (1, 1)].iter().any(|&(a, b)| {
                    let o = c[a][b];
                    let es = c[1 - a][b];
                    let et = c[a][1 - b];
                    let sign = if a == b { 1.0 } else { -1.0 };
                    let det = (es.s - o.s) * (et.t - o.t) - (es.t - o.t) * (et.s - o.s);
                    sign * det <= 0.0
                });
                if folded {
                    folds += 1;
                }
            }
        }
        folds
    }

    /// CSV with header `row,col,ds,dt`, one anchor per line in row-major order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,ds,dt\n");
        for a in 0..self.grid.anchors() {
            let (ds, dt) = self.anchor(a);
            let _ = writeln!(
                out,
                "{},{},{},{}",
                a / self.grid.cols(),
                a % self.grid.cols(),
                ds,
                dt
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::UnsupportedFormat(format!("displacement CSV: {msg}"));
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        match lines.next() {
            Some(h) if h.trim() == "row,col,ds,dt" => {}
            other => return Err(bad(format!("unexpected header {other:?}"))),
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(bad(format!("line {} has {} fields", n + 2, fields.len())));
            }
            let idx = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| bad(format!("line {}: {e}", n + 2)))
            };
            let val = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| bad(format!("line {}: {e}", n + 2)))
            };
            rows.push((
                idx(fields[0])?,
                idx(fields[1])?,
                val(fields[2])?,
                val(fields[3])?,
            ));
        }
        let mw1 = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let mw2 = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        let grid = AnchorGrid::new(mw1, mw2)?;
        if rows.len() != grid.anchors() {
            return Err(bad(format!("{} lines for a {mw1}x{mw2} grid", rows.len())));
        }
        let na = grid.anchors();
        let mut w = vec![0.0; grid.dim()];
        let mut seen = vec![false; na];
        for (j, k, ds, dt) in rows {
            let a = j * mw2 + k;
            if std::mem::replace(&mut seen[a], true) {
                return Err(bad(format!("duplicate anchor ({j},{k})")));
            }
            w[a] = ds;
            w[na + a] = dt;
        }
        DisplacementGrid::from_vec(grid, w)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text).map_err(|e| e.context(path.display().to_string()))
    }
}

pub fn eval_warp(w: &DisplacementGrid, p: Point) -> Point {
    w.eval(p)
}

pub fn inverse_warp(w: &DisplacementGrid, p: Point) -> InverseWarp {
    w.inverse(p)
}

pub fn resample(template: &Image, w: &DisplacementGrid) -> Image {
    w.resample(template)
}
