//! Regular interior lattices on the unit square, images sampled on them,
//! bilinear interpolation and discrete gradients.
//!
//! Node `(j, k)` (zero based) sits at `s = (j + 1) / (m1 + 1)`,
//! `t = (k + 1) / (m2 + 1)`. Rows run along `s`, columns along `t`, and
//! images are vectorized row-major.

use crate::error::{Error, Result};

/// A point in unit-square coordinates; `s` is the row axis, `t` the column axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub s: f64,
    pub t: f64,
}

impl Point {
    pub const fn new(s: f64, t: f64) -> Self {
        Point { s, t }
    }

    pub fn is_finite(&self) -> bool {
        self.s.is_finite() && self.t.is_finite()
    }
}

/// Interior equidistant lattice with `m1` rows and `m2` columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Lattice {
    m1: usize,
    m2: usize,
}

impl Lattice {
    pub fn new(m1: usize, m2: usize) -> Result<Self> {
        if m1 < 2 || m2 < 2 {
            return Err(Error::InvalidDimension(format!(
                "lattice must be at least 2x2, got {m1}x{m2}"
            )));
        }
        Ok(Lattice { m1, m2 })
    }

    pub fn rows(&self) -> usize {
        self.m1
    }

    pub fn cols(&self) -> usize {
        self.m2
    }

    /// Number of nodes `m = m1 * m2`.
    pub fn len(&self) -> usize {
        self.m1 * self.m2
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Spacing along `s`.
    pub fn h_s(&self) -> f64 {
        1.0 / (self.m1 + 1) as f64
    }

    /// Spacing along `t`.
    pub fn h_t(&self) -> f64 {
        1.0 / (self.m2 + 1) as f64
    }

    pub fn s(&self, j: usize) -> f64 {
        (j + 1) as f64 / (self.m1 + 1) as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        (k + 1) as f64 / (self.m2 + 1) as f64
    }

    pub fn s_coords(&self) -> Vec<f64> {
        (0..self.m1).map(|j| self.s(j)).collect()
    }

    pub fn t_coords(&self) -> Vec<f64> {
        (0..self.m2).map(|k| self.t(k)).collect()
    }

    pub fn point(&self, j: usize, k: usize) -> Point {
        Point::new(self.s(j), self.t(k))
    }

    /// Point of the row-major node index `r`.
    pub fn point_at(&self, r: usize) -> Point {
        self.point(r / self.m2, r % self.m2)
    }

    pub fn index(&self, j: usize, k: usize) -> usize {
        j * self.m2 + k
    }

    /// Iterator over all node points in row-major order.
    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |r| self.point_at(r))
    }
}

/// Convenience constructor mirroring [`Lattice::new`].
pub fn make_lattice(m1: usize, m2: usize) -> Result<Lattice> {
    Lattice::new(m1, m2)
}

/// Real values on a [`Lattice`], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    lattice: Lattice,
    values: Vec<f64>,
}

impl Image {
    pub fn new(lattice: Lattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.len() {
            return Err(Error::DimensionMismatch {
                expected: lattice.len(),
                got: values.len(),
            });
        }
        Ok(Image { lattice, values })
    }

    pub fn zeros(lattice: Lattice) -> Self {
        Self::constant(lattice, 0.0)
    }

    pub fn constant(lattice: Lattice, value: f64) -> Self {
        Image {
            lattice,
            values: vec![value; lattice.len()],
        }
    }

    /// Samples `f(s, t)` at every node.
    pub fn from_fn(lattice: Lattice, mut f: impl FnMut(Point) -> f64) -> Self {
        let values = lattice.points().map(&mut f).collect();
        Image { lattice, values }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.values[self.lattice.index(j, k)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            lattice: self.lattice,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise `self - other`.
    pub fn sub(&self, other: &Image) -> Result<Image> {
        self.zip(other, |a, b| a - b)
    }

    /// Pointwise `self + other`.
    pub fn add(&self, other: &Image) -> Result<Image> {
        self.zip(other, |a, b| a + b)
    }

    fn zip(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Image> {
        if self.lattice != other.lattice {
            return Err(Error::DimensionMismatch {
                expected: self.lattice.len(),
                got: other.lattice.len(),
            });
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Image {
            lattice: self.lattice,
            values,
        })
    }

    /// Bilinear interpolation with clamp-to-edge extension outside the lattice hull.
    pub fn interpolate(&self, p: Point) -> Result<f64> {
        if !p.is_finite() {
            return Err(Error::InvalidPoint(p.s, p.t));
        }
        Ok(self.sample(p))
    }

    /// Same as [`Image::interpolate`] without the finiteness check.
    #[inline]
    pub fn sample(&self, p: Point) -> f64 {
        let (j0, fs) = cell(p.s, self.lattice.m1);
        let (k0, ft) = cell(p.t, self.lattice.m2);
        let m2 = self.lattice.m2;
        let v = &self.values;
        let r0 = j0 * m2 + k0;
        let r1 = r0 + m2;
        let top = (1.0 - ft) * v[r0] + ft * v[r0 + 1];
        let bottom = (1.0 - ft) * v[r1] + ft * v[r1 + 1];
        (1.0 - fs) * top + fs * bottom
    }

    /// Central differences inside, second-order one-sided differences on the
    /// lattice border, both scaled by the lattice spacing.
    pub fn gradient(&self) -> GradientField {
        let (m1, m2) = (self.lattice.m1, self.lattice.m2);
        let mut ds = vec![0.0; m1 * m2];
        let mut dt = vec![0.0; m1 * m2];
        let v = &self.values;
        let hs = self.lattice.h_s();
        let ht = self.lattice.h_t();
        for j in 0..m1 {
            for k in 0..m2 {
                let r = j * m2 + k;
                ds[r] = diff(|i| v[i * m2 + k], j, m1, hs);
                dt[r] = diff(|i| v[j * m2 + i], k, m2, ht);
            }
        }
        GradientField {
            ds: Image {
                lattice: self.lattice,
                values: ds,
            },
            dt: Image {
                lattice: self.lattice,
                values: dt,
            },
        }
    }
}

/// Cell origin and fractional offset along one axis with `n` nodes, clamped.
#[inline]
fn cell(x: f64, n: usize) -> (usize, f64) {
    let mut u = (x * (n + 1) as f64 - 1.0).clamp(0.0, (n - 1) as f64);
    // lattice nodes must land exactly on an integer index
    let r = u.round();
    if (u - r).abs() < 1e-10 {
        u = r;
    }
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, u - i0 as f64)
}

#[inline]
fn diff(f: impl Fn(usize) -> f64, i: usize, n: usize, h: f64) -> f64 {
    if n == 2 {
        return (f(1) - f(0)) / h;
    }
    if i == 0 {
        (4.0 * (f(1) - f(0)) - (f(2) - f(0))) / (2.0 * h)
    } else if i == n - 1 {
        (4.0 * (f(n - 1) - f(n - 2)) - (f(n - 1) - f(n - 3))) / (2.0 * h)
    } else {
        (f(i + 1) - f(i - 1)) / (2.0 * h)
    }
}

/// Bilinear interpolation; free-function form of [`Image::interpolate`].
pub fn interp_bilinear(img: &Image, p: Point) -> Result<f64> {
    img.interpolate(p)
}

/// Discrete gradient; free-function form of [`Image::gradient`].
pub fn image_gradient(img: &Image) -> GradientField {
    img.gradient()
}

/// Partial derivatives of an image with respect to `s` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub ds: Image,
    pub dt: Image,
}

impl GradientField {
    /// Both components interpolated at `p`.
    #[inline]
    pub fn sample(&self, p: Point) -> (f64, f64) {
        (self.ds.sample(p), self.dt.sample(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn lattice_coordinates() {
        let l = Lattice::new(3, 3).unwrap();
        assert_eq!(l.s_coords(), vec![0.25, 0.5, 0.75]);
        assert_eq!(l.t_coords(), vec![0.25, 0.5, 0.75]);

        let l = Lattice::new(4, 2).unwrap();
        assert_eq!(l.s_coords(), vec![0.2, 0.4, 0.6, 0.8]);
        let t = l.t_coords();
        assert!(close(t[0], 1.0 / 3.0, 1e-15) && close(t[1], 2.0 / 3.0, 1e-15));
    }

    #[test]
    fn lattice_rejects_small_dims() {
        assert!(matches!(
            Lattice::new(1, 5),
            Err(Error::InvalidDimension(_))
        ));
        assert!(Lattice::new(5, 0).is_err());
    }

    fn test_image() -> Image {
        let l = Lattice::new(5, 4).unwrap();
        Image::from_fn(l, |p| (7.0 * p.s).sin() + p.t * p.t)
    }

    #[test]
    fn interpolation_reproduces_nodes() {
        let img = test_image();
        let l = *img.lattice();
        for j in 0..l.rows() {
            for k in 0..l.cols() {
                assert_eq!(img.interpolate(l.point(j, k)).unwrap(), img.get(j, k));
            }
        }
    }

    #[test]
    fn interpolation_cell_center_is_mean() {
        let img = test_image();
        let l = *img.lattice();
        let p = Point::new(0.5 * (l.s(1) + l.s(2)), 0.5 * (l.t(2) + l.t(3)));
        let mean = 0.25 * (img.get(1, 2) + img.get(1, 3) + img.get(2, 2) + img.get(2, 3));
        assert!(close(img.interpolate(p).unwrap(), mean, 1e-14));
    }

    #[test]
    fn interpolation_clamps_outside() {
        let img = test_image();
        let l = *img.lattice();
        let outside = img.interpolate(Point::new(-0.3, 0.5)).unwrap();
        let edge = img.interpolate(Point::new(l.s(0), 0.5)).unwrap();
        assert_eq!(outside, edge);
        let far = img.interpolate(Point::new(2.0, 7.0)).unwrap();
        assert_eq!(far, img.get(l.rows() - 1, l.cols() - 1));
    }

    #[test]
    fn interpolation_rejects_nan() {
        let img = test_image();
        assert!(matches!(
            img.interpolate(Point::new(f64::NAN, 0.5)),
            Err(Error::InvalidPoint(..))
        ));
        assert!(img.interpolate(Point::new(0.5, f64::INFINITY)).is_err());
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let img = Image::constant(Lattice::new(6, 7).unwrap(), 0.3);
        let g = img.gradient();
        assert!(g.ds.values().iter().all(|&v| v == 0.0));
        assert!(g.dt.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_ramp() {
        let img = Image::from_fn(Lattice::new(9, 6).unwrap(), |p| p.s);
        let g = img.gradient();
        assert!(g.ds.values().iter().all(|&v| close(v, 1.0, 1e-12)));
        assert!(g.dt.values().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn gradient_of_square_matches_analytic() {
        let l = Lattice::new(64, 64).unwrap();
        let h = l.h_s();
        let img = Image::from_fn(l, |p| p.s * p.s);
        let g = img.gradient();
        let err = l
            .points()
            .zip(g.ds.values())
            .map(|(p, &d)| (d - 2.0 * p.s).abs())
            .fold(0.0, f64::max);
        assert!(err < 10.0 * h * h, "max error {err}");
    }

    proptest! {
        #[test]
        fn interpolation_is_linear(
            a in -3.0..3.0f64, b in -3.0..3.0f64,
            s in -0.2..1.2f64, t in -0.2..1.2f64,
            seed in 0u64..1000,
        ) {
            let l = Lattice::new(4, 5).unwrap();
            let f = |x: f64| ((x + seed as f64) * 12.9898).sin();
            let img_a = Image::from_fn(l, |p| f(p.s * 3.1 + p.t));
            let img_b = Image::from_fn(l, |p| f(p.t * 5.3 - p.s));
            let combo = Image::new(
                l,
                img_a.values().iter().zip(img_b.values()).map(|(x, y)| a * x + b * y).collect(),
            ).unwrap();
            let p = Point::new(s, t);
            let lhs = combo.sample(p);
            let rhs = a * img_a.sample(p) + b * img_b.sample(p);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn interpolation_bounded_by_cell_corners(s in -0.2..1.2f64, t in -0.2..1.2f64) {
            let l = Lattice::new(6, 3).unwrap();
            let img = Image::from_fn(l, |p| (9.0 * p.s).cos() * (4.0 * p.t).sin());
            let p = Point::new(s, t);
            let (j0, _) = cell(s, 6);
            let (k0, _) = cell(t, 3);
            let corners = [img.get(j0, k0), img.get(j0 + 1, k0), img.get(j0, k0 + 1), img.get(j0 + 1, k0 + 1)];
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let v = img.sample(p);
            prop_assert!(v >= lo - 1e-14 && v <= hi + 1e-14);
        }

        #[test]
        fn gradient_exact_for_affine(a in -2.0..2.0f64, b in -2.0..2.0f64, c in -2.0..2.0f64) {
            let img = Image::from_fn(Lattice::new(7, 5).unwrap(), |p| a + b * p.s + c * p.t);
            let g = img.gradient();
            for (&ds, &dt) in g.ds.values().iter().zip(g.dt.values()) {
                prop_assert!((ds - b).abs() < 1e-11 && (dt - c).abs() < 1e-11);
            }
        }
    }
}
