//! Tied-down Brownian sheet priors.
//!
//! The sheet has covariance `tau2 * (s∧s' - s s') * (t∧t' - t t')`. On the
//! interior lattice its precision is `((m1+1)(m2+1)/tau2) * (T_m1 ⊗ T_m2)`,
//! where `T_n` is the tridiagonal (2, -1) Brownian-bridge precision.
//! The same kernel, evaluated at the anchor points, drives the warp prior.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::{Image, Lattice, Point};
use crate::sparse::{self, CholFactor, Ordering, SparseSym, Symbolic};
use crate::warp::{AnchorGrid, DisplacementGrid};

/// Number of terms kept in the sinh-series log-determinant.
pub const LOGDET_SERIES_TERMS: usize = 10_000;

/// Tied-down Brownian sheet covariance between two points.
pub fn bs_cov(p: Point, q: Point, tau2: f64) -> f64 {
    tau2 * (p.s.min(q.s) - p.s * q.s) * (p.t.min(q.t) - p.t * q.t)
}

/// Intensity-effect model: the sheet at scale `tau2` observed on a lattice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntensityModel {
    pub tau2: f64,
    pub lattice: Lattice,
}

impl IntensityModel {
    pub fn new(tau2: f64, lattice: Lattice) -> Result<Self> {
        if !(tau2 > 0.0) || !tau2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "tau2 must be positive, got {tau2}"
            )));
        }
        Ok(IntensityModel { tau2, lattice })
    }

    /// Precision scale `(m1+1)(m2+1)/tau2`.
    fn scale(&self) -> f64 {
        ((self.lattice.rows() + 1) * (self.lattice.cols() + 1)) as f64 / self.tau2
    }

    /// `S⁻¹` as a sparse symmetric matrix (9-point stencil).
    pub fn assemble_precision(&self) -> SparseSym {
        kron_precision(&self.lattice, self.scale(), 0.0)
    }

    /// `I + S⁻¹`, the matrix factored once per likelihood evaluation.
    pub fn precision_plus_identity(&self) -> SparseSym {
        kron_precision(&self.lattice, self.scale(), 1.0)
    }

    /// Dense covariance `S` from [`bs_cov`]; only sensible for small lattices.
    pub fn dense_covariance(&self) -> DMatrix<f64> {
        let pts: Vec<Point> = self.lattice.points().collect();
        DMatrix::from_fn(pts.len(), pts.len(), |i, j| {
            bs_cov(pts[i], pts[j], self.tau2)
        })
    }

    /// Series approximation of `log det(S + I)`.
    pub fn logdet_series(&self) -> f64 {
        logdet_intensity(self.tau2, self.lattice.rows(), self.lattice.cols())
    }

    /// Sampler drawing fields with covariance `S` through the precision factor.
    pub fn sampler(&self) -> Result<GmrfSampler> {
        let q = self.assemble_precision();
        let factor = sparse::factorize(&q, None)?;
        Ok(GmrfSampler {
            lattice: self.lattice,
            factor,
        })
    }
}

/// Lower triangle of `shift * I + scale * (T_m1 ⊗ T_m2)`, row-major nodes.
fn kron_precision(lattice: &Lattice, scale: f64, shift: f64) -> SparseSym {
    let (m1, m2) = (lattice.rows(), lattice.cols());
    let tri = |a: usize, b: usize| -> f64 {
        if a == b {
            2.0
        } else {
            -1.0
        }
    };
    let mut trip = Vec::with_capacity(9 * m1 * m2);
    for j in 0..m1 {
        for k in 0..m2 {
            let r = j * m2 + k;
            for jj in j.saturating_sub(1)..=(j + 1).min(m1 - 1) {
                for kk in k.saturating_sub(1)..=(k + 1).min(m2 - 1) {
                    let c = jj * m2 + kk;
                    if c > r {
                        continue;
                    }
                    let mut v = scale * tri(j, jj) * tri(k, kk);
                    if c == r {
                        v += shift;
                    }
                    trip.push((r, c, v));
                }
            }
        }
    }
    SparseSym::from_triplets(m1 * m2, &trip).expect("stencil has a full diagonal")
}

/// Free-function form of [`IntensityModel::assemble_precision`].
pub fn assemble_precision(model: &IntensityModel) -> SparseSym {
    model.assemble_precision()
}

/// `log(sinh(x)/x)` without overflow or cancellation.
fn log_sinhc(x: f64) -> f64 {
    if x < 1e-4 {
        let x2 = x * x;
        x2 / 6.0 - x2 * x2 / 180.0
    } else if x < 1.0 {
        // sinh(x)/x - 1 summed directly; the closed form cancels here
        let x2 = x * x;
        let mut term = 1.0;
        let mut sum = 0.0;
        for k in 1..=12 {
            term *= x2 / ((2 * k) * (2 * k + 1)) as f64;
            sum += term;
        }
        sum.ln_1p()
    } else if x > 20.0 {
        x - std::f64::consts::LN_2 - x.ln() + (-(-2.0 * x).exp()).ln_1p()
    } else {
        (x.sinh() / x).ln()
    }
}

/// Sinh-series approximation of `log det(S + I)` for the tied-down sheet,
/// truncated after [`LOGDET_SERIES_TERMS`] terms.
pub fn logdet_intensity(tau2: f64, m1: usize, m2: usize) -> f64 {
    if tau2 <= 0.0 {
        return 0.0;
    }
    let root = (tau2 * ((m1 + 1) * (m2 + 1)) as f64).sqrt();
    (1..=LOGDET_SERIES_TERMS)
        .map(|l| log_sinhc(root / (std::f64::consts::PI * l as f64)))
        .sum()
}

/// Reusable machinery for factoring `I + S⁻¹` at varying `tau2` on one lattice.
#[derive(Debug, Clone)]
pub struct IntensitySolver {
    lattice: Lattice,
    symbolic: Arc<Symbolic>,
}

impl IntensitySolver {
    pub fn new(lattice: Lattice) -> Result<Self> {
        let pattern = kron_precision(&lattice, 1.0, 1.0);
        let symbolic = Symbolic::analyze(&pattern, Ordering::MinimumDegree)?;
        Ok(IntensitySolver { lattice, symbolic })
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn symbolic(&self) -> &Arc<Symbolic> {
        &self.symbolic
    }

    /// Numeric factorization of `I + S⁻¹` at `tau2`.
    pub fn factor(&self, tau2: f64) -> Result<CholFactor> {
        let model = IntensityModel::new(tau2, self.lattice)?;
        sparse::factorize(&model.precision_plus_identity(), Some(&self.symbolic))
    }
}

/// Draws intensity fields from `N(0, sigma2 * S)`.
#[derive(Debug, Clone)]
pub struct GmrfSampler {
    lattice: Lattice,
    factor: CholFactor,
}

impl GmrfSampler {
    pub fn sample<R: Rng + ?Sized>(&self, sigma2: f64, rng: &mut R) -> Image {
        let z: Vec<f64> = (0..self.lattice.len())
            .map(|_| rng.sample(StandardNormal))
            .collect();
        let scale = sigma2.max(0.0).sqrt();
        let u = self.factor.unwhiten(&z).expect("lattice-sized draw");
        Image::new(self.lattice, u.into_iter().map(|v| scale * v).collect())
            .expect("lattice-sized draw")
    }
}

/// One draw from `N(0, sigma2 * S)`, deterministic in `seed`.
pub fn sample_gmrf(model: &IntensityModel, sigma2: f64, seed: u64) -> Result<Image> {
    if sigma2 * model.tau2 == 0.0 {
        return Ok(Image::zeros(model.lattice));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(model.sampler()?.sample(sigma2, &mut rng))
}

/// Warp prior `C = gamma2 * blockdiag(K, K)` with `K` the unit-scale sheet
/// kernel at the anchor points. Unit-scale factorizations are cached so
/// rescaling `gamma2` is free.
#[derive(Debug, Clone)]
pub struct WarpPrior {
    gamma2: f64,
    grid: AnchorGrid,
    kernel: DMatrix<f64>,
    kernel_chol: DMatrix<f64>,
    kernel_inv: DMatrix<f64>,
    kernel_logdet: f64,
}

impl WarpPrior {
    pub fn new(gamma2: f64, grid: AnchorGrid) -> Result<Self> {
        if !(gamma2 >= 0.0) || !gamma2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma2 must be nonnegative, got {gamma2}"
            )));
        }
        let pts = grid.anchor_points();
        let kernel = DMatrix::from_fn(pts.len(), pts.len(), |i, j| bs_cov(pts[i], pts[j], 1.0));
        let chol = kernel
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("warp kernel is not positive definite".into()))?;
        let kernel_chol = chol.l();
        let kernel_logdet = 2.0 * kernel_chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let kernel_inv = chol.inverse();
        Ok(WarpPrior {
            gamma2,
            grid,
            kernel,
            kernel_chol,
            kernel_inv,
            kernel_logdet,
        })
    }

    pub fn gamma2(&self) -> f64 {
        self.gamma2
    }

    pub fn grid(&self) -> &AnchorGrid {
        &self.grid
    }

    /// Same kernel at a different scale.
    pub fn with_gamma2(&self, gamma2: f64) -> WarpPrior {
        WarpPrior {
            gamma2,
            ..self.clone()
        }
    }

    /// Unit-scale kernel `K`.
    pub fn kernel(&self) -> &DMatrix<f64> {
        &self.kernel
    }

    /// `C = gamma2 * blockdiag(K, K)`.
    pub fn covariance(&self) -> DMatrix<f64> {
        block_diag(&self.kernel, self.gamma2)
    }

    /// `blockdiag(K⁻¹, K⁻¹)`, the precision at `gamma2 = 1`.
    pub fn unit_precision(&self) -> DMatrix<f64> {
        block_diag(&self.kernel_inv, 1.0)
    }

    /// `C⁻¹`.
    pub fn precision(&self) -> DMatrix<f64> {
        block_diag(&self.kernel_inv, 1.0 / self.gamma2)
    }

    /// Lower Cholesky factor of `C`.
    pub fn cholesky(&self) -> DMatrix<f64> {
        block_diag(&self.kernel_chol, self.gamma2.sqrt())
    }

    /// `log det C`.
    pub fn logdet(&self) -> f64 {
        2.0 * (self.grid.anchors() as f64 * self.gamma2.ln() + self.kernel_logdet)
    }

    /// One draw from `N(0, sigma2 * C)`.
    pub fn sample<R: Rng + ?Sized>(&self, sigma2: f64, rng: &mut R) -> DisplacementGrid {
        let na = self.grid.anchors();
        let scale = (sigma2 * self.gamma2).max(0.0).sqrt();
        let mut w = Vec::with_capacity(2 * na);
        for _ in 0..2 {
            let z: Vec<f64> = (0..na).map(|_| rng.sample(StandardNormal)).collect();
            for i in 0..na {
                let v: f64 = (0..=i).map(|j| self.kernel_chol[(i, j)] * z[j]).sum();
                w.push(scale * v);
            }
        }
        DisplacementGrid::from_vec(self.grid, w).expect("grid-sized draw")
    }
}

fn block_diag(block: &DMatrix<f64>, scale: f64) -> DMatrix<f64> {
    let n = block.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    out.view_mut((0, 0), (n, n)).copy_from(&(block * scale));
    out.view_mut((n, n), (n, n)).copy_from(&(block * scale));
    out
}

/// Dense warp covariance with its Cholesky factor and inverse.
#[derive(Debug, Clone)]
pub struct WarpCovariance {
    pub cov: DMatrix<f64>,
    pub chol: DMatrix<f64>,
    pub inv: DMatrix<f64>,
}

pub fn warp_cov_matrix(prior: &WarpPrior) -> Result<WarpCovariance> {
    if !(prior.gamma2 > 0.0) {
        return Err(Error::Numerical(
            "warp covariance is singular at gamma2 = 0".into(),
        ));
    }
    Ok(WarpCovariance {
        cov: prior.covariance(),
        chol: prior.cholesky(),
        inv: prior.precision(),
    })
}

/// One draw from `N(0, sigma2 * C)`, deterministic in `seed`.
pub fn sample_warp(prior: &WarpPrior, sigma2: f64, seed: u64) -> DisplacementGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    prior.sample(sigma2, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: dense inverse of the covariance built from `bs_cov`.
    fn dense_precision_oracle(model: &IntensityModel) -> DMatrix<f64> {
        model.dense_covariance().try_inverse().unwrap()
    }

    #[test]
    fn covariance_values() {
        let c = Point::new(0.5, 0.5);
        assert_eq!(bs_cov(c, c, 1.0), 0.0625);
        assert_eq!(bs_cov(Point::new(0.25, 0.5), c, 2.0), 0.0625);
        for p in [
            Point::new(0.0, 0.3),
            Point::new(1.0, 0.3),
            Point::new(0.2, 0.0),
            Point::new(0.2, 1.0),
        ] {
            assert_eq!(bs_cov(p, c, 3.0), 0.0);
        }
    }

    #[test]
    fn precision_center_entry_on_3x3() {
        let model = IntensityModel::new(1.0, Lattice::new(3, 3).unwrap()).unwrap();
        let q = model.assemble_precision();
        assert!((q.get(4, 4) - 64.0).abs() < 1e-12);
        let oracle = dense_precision_oracle(&model);
        assert!((oracle[(4, 4)] - 64.0).abs() < 1e-8);
    }

    #[test]
    fn precision_times_covariance_is_identity() {
        let model = IntensityModel::new(0.7, Lattice::new(5, 4).unwrap()).unwrap();
        let q = model.assemble_precision().to_dense();
        let s = model.dense_covariance();
        let m = s.nrows();
        let mut dev: f64 = 0.0;
        for i in 0..m {
            for j in 0..m {
                let v: f64 = (0..m).map(|k| q[i][k] * s[(k, j)]).sum();
                dev = dev.max((v - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        assert!(dev < 1e-8, "deviation {dev}");
    }

    #[test]
    fn precision_stencil_structure() {
        let model = IntensityModel::new(2.0, Lattice::new(6, 5).unwrap()).unwrap();
        let q = model.assemble_precision();
        let dense = q.to_dense();
        for i in 0..q.dim() {
            assert!(q.row_nnz(i) <= 9);
            for j in 0..q.dim() {
                assert_eq!(dense[i][j], dense[j][i]);
            }
        }
        // interior stencil {4, -2, 1} times the scale
        let scale = 7.0 * 6.0 / 2.0;
        let r = 2 * 5 + 2;
        assert_eq!(dense[r][r], 4.0 * scale);
        assert_eq!(dense[r][r + 1], -2.0 * scale);
        assert_eq!(dense[r][r + 5], -2.0 * scale);
        assert_eq!(dense[r][r + 6], scale);
        assert_eq!(dense[r][r - 4], scale);
    }

    #[test]
    fn precision_matches_oracle_up_to_8x8() {
        for m1 in 2..=8 {
            for m2 in 2..=8 {
                let model = IntensityModel::new(1.3, Lattice::new(m1, m2).unwrap()).unwrap();
                let q = model.assemble_precision().to_dense();
                let oracle = dense_precision_oracle(&model);
                let scale = oracle.abs().max();
                for i in 0..m1 * m2 {
                    for j in 0..m1 * m2 {
                        assert!((q[i][j] - oracle[(i, j)]).abs() <= 1e-6 * scale);
                    }
                }
            }
        }
    }

    #[test]
    fn series_logdet_limits_and_monotonicity() {
        assert_eq!(logdet_intensity(0.0, 31, 31), 0.0);
        let mut prev = 0.0;
        for tau2 in [1e-6, 0.01, 0.1, 1.0, 10.0, 1e3, 1e6] {
            let v = logdet_intensity(tau2, 31, 31);
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn log_sinhc_branches_agree() {
        for x in [1e-6f64, 9.99e-5, 1.0001e-4] {
            let x2 = x * x;
            let series = x2 / 6.0 - x2 * x2 / 180.0 + x2 * x2 * x2 / 2835.0;
            assert!((log_sinhc(x) - series).abs() < 1e-12 * series);
        }
        for x in [0.5f64, 19.99, 20.01, 30.0] {
            let direct = (x.sinh() / x).ln();
            assert!((log_sinhc(x) - direct).abs() < 1e-12 * direct);
        }
        assert!(log_sinhc(1e4).is_finite());
    }

    /// Exact `log det(S + I)` from the eigenvalues of the Kronecker form.
    fn eigen_logdet_oracle(tau2: f64, m1: usize, m2: usize) -> f64 {
        let eig = |j: usize, n: usize| {
            2.0 - 2.0 * (j as f64 * std::f64::consts::PI / (n + 1) as f64).cos()
        };
        let c = ((m1 + 1) * (m2 + 1)) as f64 / tau2;
        let mut total = 0.0;
        for j in 1..=m1 {
            for k in 1..=m2 {
                total += (1.0 / (c * eig(j, m1) * eig(k, m2))).ln_1p();
            }
        }
        total
    }

    #[test]
    fn series_logdet_close_to_exact() {
        let exact = eigen_logdet_oracle(1.0, 31, 31);
        let series = logdet_intensity(1.0, 31, 31);
        assert!(
            (series - exact).abs() / exact < 0.02,
            "series {series} exact {exact}"
        );
    }

    #[test]
    fn factor_logdet_matches_eigen_oracle() {
        let lattice = Lattice::new(9, 6).unwrap();
        let model = IntensityModel::new(0.8, lattice).unwrap();
        let f = sparse::factorize(&model.precision_plus_identity(), None).unwrap();
        let logdet_sinv =
            lattice.len() as f64 * model.scale().ln() + 6.0 * 10f64.ln() + 9.0 * 7f64.ln();
        let exact = eigen_logdet_oracle(0.8, 9, 6);
        assert!((f.logdet() - logdet_sinv - exact).abs() < 1e-8);
    }

    proptest::proptest! {
        #[test]
        fn series_logdet_nonnegative(tau2 in 0.0f64..1e4, m1 in 2usize..40, m2 in 2usize..40) {
            proptest::prop_assert!(logdet_intensity(tau2, m1, m2) >= 0.0);
        }
    }

    #[test]
    fn single_anchor_prior() {
        let prior = WarpPrior::new(1.0, AnchorGrid::new(1, 1).unwrap()).unwrap();
        let c = warp_cov_matrix(&prior).unwrap();
        assert_eq!(c.cov, DMatrix::from_diagonal_element(2, 2, 0.0625));
    }

    #[test]
    fn prior_blocks_and_inverse() {
        let prior = WarpPrior::new(0.4, AnchorGrid::new(5, 5).unwrap()).unwrap();
        let c = warp_cov_matrix(&prior).unwrap();
        let na = 25;
        for i in 0..na {
            for j in na..2 * na {
                assert_eq!(c.cov[(i, j)], 0.0);
                assert_eq!(c.cov[(j, i)], 0.0);
            }
        }
        let prod = &c.cov * &c.inv;
        let dev = (prod - DMatrix::identity(2 * na, 2 * na)).abs().max();
        assert!(dev < 1e-10, "deviation {dev}");
        let llt = &c.chol * c.chol.transpose();
        assert!((llt - &c.cov).abs().max() < 1e-14);
        let direct = c
            .cov
            .clone()
            .cholesky()
            .unwrap()
            .l()
            .diagonal()
            .iter()
            .map(|d| 2.0 * d.ln())
            .sum::<f64>();
        assert!((prior.logdet() - direct).abs() < 1e-9);
    }

    #[test]
    fn kernel_is_submatrix_of_intensity_covariance() {
        // 3x3 anchors sit on every other node of a 7x7 lattice
        let lattice = Lattice::new(7, 7).unwrap();
        let s = IntensityModel::new(1.0, lattice)
            .unwrap()
            .dense_covariance();
        let prior = WarpPrior::new(1.0, AnchorGrid::new(3, 3).unwrap()).unwrap();
        let nodes: Vec<usize> = [1, 3, 5]
            .iter()
            .flat_map(|&j| [1, 3, 5].map(|k| lattice.index(j, k)))
            .collect();
        for (a, &na) in nodes.iter().enumerate() {
            for (b, &nb) in nodes.iter().enumerate() {
                assert!((prior.kernel()[(a, b)] - s[(na, nb)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn gmrf_sampling_zero_and_deterministic() {
        let model = IntensityModel::new(1.0, Lattice::new(6, 7).unwrap()).unwrap();
        let z = sample_gmrf(&model, 0.0, 3).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.0));
        let a = sample_gmrf(&model, 1.0, 3).unwrap();
        let b = sample_gmrf(&model, 1.0, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_gmrf(&model, 1.0, 4).unwrap());
    }

    #[test]
    fn gmrf_center_variance_monte_carlo() {
        let lattice = Lattice::new(15, 15).unwrap();
        let model = IntensityModel::new(1.0, lattice).unwrap();
        let sampler = model.sampler().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let center = lattice.index(7, 7);
        let draws = 2000;
        let var = (0..draws)
            .map(|_| sampler.sample(1.0, &mut rng).values()[center].powi(2))
            .sum::<f64>()
            / draws as f64;
        assert!((var - 0.0625).abs() / 0.0625 < 0.10, "variance {var}");
    }

    #[test]
    fn warp_sampling() {
        let grid = AnchorGrid::new(3, 3).unwrap();
        let prior = WarpPrior::new(2.0, grid).unwrap();
        assert_eq!(sample_warp(&prior, 0.0, 1).max_abs(), 0.0);
        assert_eq!(sample_warp(&prior.with_gamma2(0.0), 1.0, 1).max_abs(), 0.0);
        assert_eq!(sample_warp(&prior, 0.5, 9), sample_warp(&prior, 0.5, 9));

        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 5000;
        let sigma2 = 0.5;
        let var = (0..draws)
            .map(|_| prior.sample(sigma2, &mut rng).as_slice()[4].powi(2))
            .sum::<f64>()
            / draws as f64;
        let expected = sigma2 * 2.0 * prior.kernel()[(4, 4)];
        assert!(
            (var - expected).abs() / expected < 0.10,
            "variance {var} vs {expected}"
        );
    }
}
