//! Likelihood of the linearized model.
//!
//! After linearizing the warped template around `w0`, image `i` satisfies
//! `r_i = Z_i w_i + x_i + e_i` with `r_i = y_i - theta(v(., w0_i)) + Z_i w0_i`,
//! so `r_i ~ N(0, sigma2 V)` with `V = Z C Zᵀ + S + I`. Everything is computed
//! from one sparse factorization `L Lᵀ = P (I + S⁻¹) Pᵀ`, forward solves only,
//! and a small dense `q × q` system per image.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmrf::{logdet_intensity, IntensityModel, IntensitySolver, WarpPrior};
use crate::grid::{GradientField, Image, Lattice};
use crate::sparse::CholFactor;
use crate::warp::DisplacementGrid;

/// Residual, intensity and warp variance parameters.
///
/// The intensity covariance is `sigma2 * S(tau2)` and the warp covariance
/// `sigma2 * C(gamma2)`, so the absolute scales are the products.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceParams {
    pub sigma2: f64,
    pub tau2: f64,
    pub gamma2: f64,
}

impl VarianceParams {
    pub fn new(sigma2: f64, tau2: f64, gamma2: f64) -> Result<Self> {
        let p = VarianceParams {
            sigma2,
            tau2,
            gamma2,
        };
        p.validate()?;
        Ok(p)
    }

    /// From the absolute scales `sigma2`, `sigma2 * tau2`, `sigma2 * gamma2`.
    pub fn from_products(sigma2: f64, sigma2_tau2: f64, sigma2_gamma2: f64) -> Result<Self> {
        Self::new(sigma2, sigma2_tau2 / sigma2, sigma2_gamma2 / sigma2)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("tau2", self.tau2),
            ("gamma2", self.gamma2),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn sigma2_tau2(&self) -> f64 {
        self.sigma2 * self.tau2
    }

    pub fn sigma2_gamma2(&self) -> f64 {
        self.sigma2 * self.gamma2
    }
}

/// Sparse `m × q` Jacobian of the warped template with respect to the warp
/// parameters, stored by rows with at most eight entries each.
#[derive(Debug, Clone, PartialEq)]
pub struct ZMatrix {
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl ZMatrix {
    /// All-zero matrix.
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        ZMatrix {
            ncols,
            row_ptr: vec![0; nrows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nrows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Stored `(column, value)` pairs of row `r`.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn row_nnz(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    /// `Z w`.
    pub fn mul_vec(&self, w: &[f64]) -> Vec<f64> {
        (0..self.nrows())
            .map(|r| self.row(r).map(|(c, v)| v * w[c]).sum())
            .collect()
    }

    /// `Zᵀ x`.
    pub fn tr_mul_vec(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.ncols);
        for (r, &xr) in x.iter().enumerate() {
            for (c, v) in self.row(r) {
                out[c] += v * xr;
            }
        }
        out
    }

    /// `Zᵀ Z`.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.ncols, self.ncols);
        for r in 0..self.nrows() {
            for (a, va) in self.row(r) {
                for (b, vb) in self.row(r) {
                    g[(a, b)] += va * vb;
                }
            }
        }
        g
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows(), self.ncols);
        for r in 0..self.nrows() {
            for (c, v) in self.row(r) {
                d[(r, c)] += v;
            }
        }
        d
    }
}

/// Jacobian of `resample(template, w)` at `w0`, using a precomputed template gradient.
pub fn assemble_z_with(grad: &GradientField, w0: &DisplacementGrid) -> ZMatrix {
    let lattice = *grad.ds.lattice();
    let grid = w0.grid();
    let na = grid.anchors();
    let mut row_ptr = Vec::with_capacity(lattice.len() + 1);
    let mut col_idx = Vec::with_capacity(8 * lattice.len());
    let mut values = Vec::with_capacity(8 * lattice.len());
    row_ptr.push(0);
    for p in lattice.points() {
        let basis = grid.basis(p);
        let (gs, gt) = grad.sample(w0.eval(p));
        for &(a, wt) in basis.as_slice() {
            if gs != 0.0 {
                col_idx.push(a);
                values.push(wt * gs);
            }
            if gt != 0.0 {
                col_idx.push(na + a);
                values.push(wt * gt);
            }
        }
        row_ptr.push(values.len());
    }
    ZMatrix {
        ncols: grid.dim(),
        row_ptr,
        col_idx,
        values,
    }
}

/// Jacobian of `resample(template, w)` at `w0`.
pub fn assemble_z(template: &Image, w0: &DisplacementGrid) -> ZMatrix {
    assemble_z_with(&template.gradient(), w0)
}

/// `(S + I)⁻¹ r` given the factor of `I + S⁻¹`.
pub fn apply_ainv(f: &CholFactor, r: &[f64]) -> Result<Vec<f64>> {
    let s = f.solve(r)?;
    Ok(r.iter().zip(&s).map(|(a, b)| a - b).collect())
}

/// Products with `A = (S + I)⁻¹` needed by the likelihood and warp updates.
#[derive(Debug, Clone)]
pub struct AProducts {
    /// `Zᵀ A Z`
    pub ztaz: DMatrix<f64>,
    /// `Zᵀ A r`
    pub ztar: DVector<f64>,
    /// `rᵀ A r`
    pub rtar: f64,
}

/// Forms `Zᵀ A Z`, `Zᵀ A r` and `rᵀ A r` from forward solves with `f`:
/// with `u = L⁻¹ P r` and `W = L⁻¹ P Z`, `rᵀ A r = rᵀ r - uᵀ u` and so on.
pub fn a_products(f: &CholFactor, z: &ZMatrix, r: &[f64]) -> Result<AProducts> {
    let m = z.nrows();
    if r.len() != m || f.dim() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            got: if r.len() != m { r.len() } else { f.dim() },
        });
    }
    let q = z.ncols();
    let zd = z.to_dense();
    let mut w = DMatrix::zeros(m, q);
    for c in 0..q {
        let col = zd.column(c);
        if col.iter().all(|&v| v == 0.0) {
            continue;
        }
        let wc = f.whiten(col.as_slice())?;
        w.column_mut(c).copy_from_slice(&wc);
    }
    let u = DVector::from_vec(f.whiten(r)?);
    let rv = DVector::from_column_slice(r);
    Ok(AProducts {
        ztaz: z.gram() - w.tr_mul(&w),
        ztar: zd.tr_mul(&rv) - w.tr_mul(&u),
        rtar: rv.norm_squared() - u.norm_squared(),
    })
}

/// Per-image quadratic form `rᵀ V⁻¹ r` and `log det M + log det C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageTerms {
    pub quad: f64,
    pub logdet_mc: f64,
}

/// Woodbury and determinant-lemma terms for one image.
///
/// With `C = Lc Lcᵀ`, `M = C⁻¹ + ZᵀAZ = Lc⁻ᵀ B Lc⁻¹` where
/// `B = I + Lcᵀ ZᵀAZ Lc`, so `log det M + log det C = log det B` and
/// `bᵀ M⁻¹ b = ‖chol(B)⁻¹ Lcᵀ b‖²`. This stays finite as `gamma2 -> 0`.
pub fn image_terms(prods: &AProducts, prior: &WarpPrior) -> Result<ImageTerms> {
    let lc = prior.cholesky();
    let q = lc.nrows();
    if prods.ztaz.nrows() != q {
        return Err(Error::DimensionMismatch {
            expected: q,
            got: prods.ztaz.nrows(),
        });
    }
    let b = DMatrix::identity(q, q) + lc.tr_mul(&prods.ztaz) * &lc;
    let chol = b
        .cholesky()
        .ok_or_else(|| Error::Numerical("M = C⁻¹ + ZᵀAZ is not positive definite".into()))?;
    let logdet_mc = 2.0
        * chol
            .l_dirty()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    let mut v = lc.tr_mul(&prods.ztar);
    chol.l_dirty().solve_lower_triangular_mut(&mut v);
    Ok(ImageTerms {
        quad: prods.rtar - v.norm_squared(),
        logdet_mc,
    })
}

/// `rᵀ V⁻¹ r` with `V = Z C Zᵀ + S + I`.
pub fn quad_form_vinv(f: &CholFactor, z: &ZMatrix, prior: &WarpPrior, r: &[f64]) -> Result<f64> {
    Ok(image_terms(&a_products(f, z, r)?, prior)?.quad)
}

/// How `log det(S + I)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogDetMode {
    /// Truncated sinh series.
    #[default]
    Series,
    /// Exact, from the factor of `I + S⁻¹` and the closed-form `det S⁻¹`.
    Exact,
}

/// `log det S⁻¹ = m log c + m2 log(m1+1) + m1 log(m2+1)` for `c = (m1+1)(m2+1)/tau2`.
fn logdet_precision(tau2: f64, lattice: &Lattice) -> f64 {
    let (m1, m2) = (lattice.rows() as f64, lattice.cols() as f64);
    let c = (m1 + 1.0) * (m2 + 1.0) / tau2;
    m1 * m2 * c.ln() + m2 * (m1 + 1.0).ln() + m1 * (m2 + 1.0).ln()
}

/// `log det(S + I)` in the requested mode; `f` must factor `I + S⁻¹` at `tau2`.
pub fn logdet_s_plus_i(f: &CholFactor, tau2: f64, lattice: &Lattice, mode: LogDetMode) -> f64 {
    match mode {
        LogDetMode::Series => logdet_intensity(tau2, lattice.rows(), lattice.cols()),
        LogDetMode::Exact => f.logdet() - logdet_precision(tau2, lattice),
    }
}

/// `log det V` through the determinant lemma, with the series for `log det(S + I)`.
pub fn logdet_v(
    f: &CholFactor,
    z: &ZMatrix,
    prior: &WarpPrior,
    tau2: f64,
    lattice: &Lattice,
) -> Result<f64> {
    logdet_v_with(f, z, prior, tau2, lattice, LogDetMode::Series)
}

pub fn logdet_v_with(
    f: &CholFactor,
    z: &ZMatrix,
    prior: &WarpPrior,
    tau2: f64,
    lattice: &Lattice,
    mode: LogDetMode,
) -> Result<f64> {
    let zero = vec![0.0; z.nrows()];
    let terms = image_terms(&a_products(f, z, &zero)?, prior)?;
    Ok(terms.logdet_mc + logdet_s_plus_i(f, tau2, lattice, mode))
}

/// `sigma2` minimizing the likelihood for fixed `tau2`, `gamma2`.
pub fn profile_sigma2(quad_total: f64, n: usize, m: usize) -> Result<f64> {
    if !(quad_total > 0.0) || !quad_total.is_finite() {
        return Err(Error::DegenerateFit(format!(
            "cannot profile sigma2 from quadratic total {quad_total}"
        )));
    }
    Ok(quad_total / (n * m) as f64)
}

/// One image prepared for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub struct LinearizedImage {
    pub residual: Vec<f64>,
    pub z: ZMatrix,
}

impl LinearizedImage {
    /// `r = y - theta(v(., w0)) + Z w0`.
    pub fn new(
        y: &Image,
        template: &Image,
        grad: &GradientField,
        w0: &DisplacementGrid,
    ) -> Result<Self> {
        if y.lattice() != template.lattice() {
            return Err(Error::DimensionMismatch {
                expected: template.lattice().len(),
                got: y.lattice().len(),
            });
        }
        let z = assemble_z_with(grad, w0);
        let warped = w0.resample(template);
        let zw = z.mul_vec(w0.as_slice());
        let residual = y
            .values()
            .iter()
            .zip(warped.values())
            .zip(&zw)
            .map(|((a, b), c)| a - b + c)
            .collect();
        Ok(LinearizedImage { residual, z })
    }
}

/// Sums over images at `sigma2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodTerms {
    pub n: usize,
    pub m: usize,
    pub quad_total: f64,
    pub logdet_total: f64,
}

impl LikelihoodTerms {
    /// Negative log-likelihood at `sigma2`, without the `2 pi` constant.
    pub fn nll(&self, sigma2: f64) -> f64 {
        let nm = (self.n * self.m) as f64;
        0.5 * nm * sigma2.ln() + 0.5 * self.logdet_total + 0.5 * self.quad_total / sigma2
    }

    pub fn sigma2_hat(&self) -> Result<f64> {
        profile_sigma2(self.quad_total, self.n, self.m)
    }

    /// Likelihood minimized over `sigma2`, with the minimizer.
    pub fn profiled(&self) -> Result<(f64, f64)> {
        let s2 = self.sigma2_hat()?;
        Ok((s2, self.nll(s2)))
    }
}

/// Evaluates the linearized likelihood for many `(tau2, gamma2)` on fixed
/// residuals and Jacobians. Each evaluation performs one sparse factorization.
#[derive(Debug, Clone)]
pub struct LikelihoodEvaluator {
    images: Vec<LinearizedImage>,
    solver: IntensitySolver,
    prior: WarpPrior,
    mode: LogDetMode,
}

impl LikelihoodEvaluator {
    pub fn new(
        images: Vec<LinearizedImage>,
        solver: IntensitySolver,
        prior: WarpPrior,
    ) -> Result<Self> {
        let m = solver.lattice().len();
        let q = prior.grid().dim();
        for img in &images {
            if img.residual.len() != m {
                return Err(Error::DimensionMismatch {
                    expected: m,
                    got: img.residual.len(),
                });
            }
            if img.z.ncols() != q {
                return Err(Error::DimensionMismatch {
                    expected: q,
                    got: img.z.ncols(),
                });
            }
        }
        if images.is_empty() {
            return Err(Error::InvalidParameter("no images".into()));
        }
        Ok(LikelihoodEvaluator {
            images,
            solver,
            prior,
            mode: LogDetMode::Series,
        })
    }

    pub fn with_mode(mut self, mode: LogDetMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn images(&self) -> &[LinearizedImage] {
        &self.images
    }

    pub fn terms(&self, tau2: f64, gamma2: f64) -> Result<LikelihoodTerms> {
        let f = self.solver.factor(tau2)?;
        let prior = self.prior.with_gamma2(gamma2);
        if !(gamma2 >= 0.0) || !gamma2.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "gamma2 must be nonnegative, got {gamma2}"
            )));
        }
        let per_image: Vec<Result<ImageTerms>> = self
            .images
            .par_iter()
            .map(|img| image_terms(&a_products(&f, &img.z, &img.residual)?, &prior))
            .collect();
        let mut quad_total = 0.0;
        let mut logdet_total = 0.0;
        let logdet_si = logdet_s_plus_i(&f, tau2, self.solver.lattice(), self.mode);
        for t in per_image {
            let t = t?;
            quad_total += t.quad;
            logdet_total += t.logdet_mc + logdet_si;
        }
        Ok(LikelihoodTerms {
            n: self.images.len(),
            m: self.solver.lattice().len(),
            quad_total,
            logdet_total,
        })
    }

    pub fn nll(&self, params: &VarianceParams) -> Result<f64> {
        params.validate()?;
        Ok(self.terms(params.tau2, params.gamma2)?.nll(params.sigma2))
    }
}

/// Negative log-likelihood of the linearized model (up to the `2 pi` constant)
/// for images `data` around the warps `w0s`.
pub fn nll(
    data: &[Image],
    template: &Image,
    w0s: &[DisplacementGrid],
    params: &VarianceParams,
) -> Result<f64> {
    nll_with(data, template, w0s, params, LogDetMode::Series)
}

pub fn nll_with(
    data: &[Image],
    template: &Image,
    w0s: &[DisplacementGrid],
    params: &VarianceParams,
    mode: LogDetMode,
) -> Result<f64> {
    params.validate()?;
    if data.len() != w0s.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: w0s.len(),
        });
    }
    let grid = *w0s
        .first()
        .ok_or_else(|| Error::InvalidParameter("no images".into()))?
        .grid();
    let grad = template.gradient();
    let images = data
        .iter()
        .zip(w0s)
        .map(|(y, w0)| LinearizedImage::new(y, template, &grad, w0))
        .collect::<Result<Vec<_>>>()?;
    let solver = IntensitySolver::new(*template.lattice())?;
    let prior = WarpPrior::new(params.gamma2, grid)?;
    LikelihoodEvaluator::new(images, solver, prior)?
        .with_mode(mode)
        .nll(params)
}

/// Factor of `I + S⁻¹` for a model, analysed from scratch.
pub fn intensity_factor(model: &IntensityModel) -> Result<CholFactor> {
    IntensitySolver::new(model.lattice)?.factor(model.tau2)
}
