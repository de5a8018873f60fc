//! Alternating estimation of the template, variance parameters and warps.
//!
//! The outer loop estimates `(tau2, gamma2)` by minimizing the linearized
//! likelihood with `sigma2` profiled out. The inner loop predicts each warp
//! as the posterior mode, removes the mean displacement across images,
//! moves the linearization points there and recomputes the template from
//! back-warped images.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmrf::{IntensitySolver, WarpPrior};
use crate::grid::{GradientField, Image, Lattice};
use crate::likelihood::{
    a_products, assemble_z_with, LikelihoodEvaluator, LinearizedImage, LogDetMode, VarianceParams,
};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::sparse::CholFactor;
use crate::warp::{AnchorGrid, DisplacementGrid};

/// Floor used for `sigma2` when the model reproduces the data exactly.
pub const SIGMA2_FLOOR: f64 = 1e-12;

/// Gauss-Newton settings for warp prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonOptions {
    pub max_steps: usize,
    pub max_halvings: usize,
    /// Stop when the relative decrease of the objective drops below this.
    pub tol: f64,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        GaussNewtonOptions {
            max_steps: 20,
            max_halvings: 10,
            tol: 1e-6,
        }
    }
}

/// Configuration of [`fit`].
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub warp_grid: AnchorGrid,
    pub outer_iters: usize,
    pub inner_iters: usize,
    pub init_tau2: f64,
    pub init_gamma2: f64,
    pub optimizer: NelderMeadOptions,
    pub gauss_newton: GaussNewtonOptions,
    /// Stop the outer loop once the relative likelihood change is below this.
    pub early_stop: Option<f64>,
    pub logdet_mode: LogDetMode,
    /// Subtract the across-image mean displacement after each warp update.
    pub center_warps: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            warp_grid: AnchorGrid::new(4, 4).expect("nonzero grid"),
            outer_iters: 5,
            inner_iters: 3,
            init_tau2: 1.0,
            init_gamma2: 0.1,
            optimizer: NelderMeadOptions::default(),
            gauss_newton: GaussNewtonOptions::default(),
            early_stop: None,
            logdet_mode: LogDetMode::Series,
            center_warps: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_iters == 0 {
            return Err(Error::InvalidParameter(
                "outer and inner iteration counts must be at least 1".into(),
            ));
        }
        for (name, v) in [
            ("init_tau2", self.init_tau2),
            ("init_gamma2", self.init_gamma2),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-fit diagnostics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    /// Likelihood reached by each variance estimation.
    pub estimation_nll: Vec<f64>,
    /// Objective evaluations used by each variance estimation.
    pub optimizer_evals: Vec<usize>,
    /// Folded cells of each final warp.
    pub fold_counts: Vec<usize>,
    /// Warp predictions whose Gauss-Newton loop hit the step limit.
    pub gauss_newton_limit_hits: usize,
    /// True when the data were reproduced exactly and `sigma2` was floored.
    pub degenerate: bool,
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub template: Image,
    pub params: VarianceParams,
    pub warps: Vec<DisplacementGrid>,
    /// Predicted intensity fields given the final warps.
    pub intensities: Vec<Image>,
    /// Likelihood after each outer iteration.
    pub trace: Vec<f64>,
    pub diagnostics: FitDiagnostics,
}

impl ModelFit {
    /// Warped template plus predicted intensity field for image `index`.
    pub fn reconstruct(&self, index: usize) -> Result<Image> {
        reconstruct(self, index)
    }
}

fn check_lattices(data: &[Image]) -> Result<Lattice> {
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidParameter("no images".into()))?;
    let lattice = *first.lattice();
    for y in data {
        if *y.lattice() != lattice {
            return Err(Error::DimensionMismatch {
                expected: lattice.len(),
                got: y.lattice().len(),
            });
        }
    }
    Ok(lattice)
}

/// Pointwise mean of the images sampled at the inverse warps of the lattice nodes.
pub fn update_template(data: &[Image], warps: &[DisplacementGrid]) -> Result<Image> {
    let lattice = check_lattices(data)?;
    if warps.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: warps.len(),
        });
    }
    let n = data.len() as f64;
    let values = (0..lattice.len())
        .into_par_iter()
        .map(|r| {
            let p = lattice.point_at(r);
            data.iter()
                .zip(warps)
                .map(|(y, w)| y.sample(w.inverse(p).point))
                .sum::<f64>()
                / n
        })
        .collect();
    Image::new(lattice, values)
}

/// Data metric in the warp objective.
#[derive(Debug, Clone, Copy)]
pub enum Metric<'a> {
    /// `(S + I)⁻¹` through the factor of `I + S⁻¹`.
    Intensity(&'a CholFactor),
    /// Plain sum of squares.
    Identity,
}

impl Metric<'_> {
    fn norm2(&self, e: &[f64]) -> Result<f64> {
        let ee: f64 = e.iter().map(|v| v * v).sum();
        match self {
            Metric::Identity => Ok(ee),
            Metric::Intensity(f) => {
                let u = f.whiten(e)?;
                Ok(ee - u.iter().map(|v| v * v).sum::<f64>())
            }
        }
    }
}

/// Posterior-mode warp with its objective history.
#[derive(Debug, Clone)]
pub struct WarpPrediction {
    pub w: DisplacementGrid,
    /// Objective at the start and after every accepted step.
    pub objective: Vec<f64>,
    pub hit_step_limit: bool,
}

/// Minimizes `eᵀ A e + wᵀ P w`, `e = y - theta(v(., w))`, by Gauss-Newton
/// with step halving.
pub fn gauss_newton_warp(
    y: &Image,
    template: &Image,
    grad: &GradientField,
    metric: Metric<'_>,
    penalty: &DMatrix<f64>,
    w_init: &DisplacementGrid,
    opts: &GaussNewtonOptions,
) -> Result<WarpPrediction> {
    let grid = *w_init.grid();
    let q = grid.dim();
    if penalty.nrows() != q || penalty.ncols() != q {
        return Err(Error::DimensionMismatch {
            expected: q,
            got: penalty.nrows(),
        });
    }
    if y.lattice() != template.lattice() {
        return Err(Error::DimensionMismatch {
            expected: template.lattice().len(),
            got: y.lattice().len(),
        });
    }
    let residual = |w: &DisplacementGrid| -> Vec<f64> {
        let warped = w.resample(template);
        y.values()
            .iter()
            .zip(warped.values())
            .map(|(a, b)| a - b)
            .collect()
    };
    let objective = |e: &[f64], w: &DVector<f64>| -> Result<f64> {
        Ok(metric.norm2(e)? + w.dot(&(penalty * w)))
    };

    let mut w = w_init.clone();
    let mut wv = DVector::from_column_slice(w.as_slice());
    let mut e = residual(&w);
    let mut obj = objective(&e, &wv)?;
    let mut trace = vec![obj];
    let mut hit_step_limit = true;
    for _ in 0..opts.max_steps {
        let z = assemble_z_with(grad, &w);
        let (ztaz, ztae) = match metric {
            Metric::Intensity(f) => {
                let p = a_products(f, &z, &e)?;
                (p.ztaz, p.ztar)
            }
            Metric::Identity => (z.gram(), z.tr_mul_vec(&e)),
        };
        let normal = ztaz + penalty;
        let rhs = ztae - penalty * &wv;
        let delta = solve_normal(normal, &rhs)?;

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = &wv + &delta * step;
            let cand_grid = DisplacementGrid::from_vec(grid, cand.as_slice().to_vec())?;
            let ce = residual(&cand_grid);
            let cobj = objective(&ce, &cand)?;
            if cobj < obj {
                accepted = Some((cand, cand_grid, ce, cobj));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, cand_grid, ce, cobj)) = accepted else {
            hit_step_limit = false;
            break;
        };
        let rel = (obj - cobj) / obj.abs().max(f64::MIN_POSITIVE);
        wv = cand;
        w = cand_grid;
        e = ce;
        obj = cobj;
        trace.push(obj);
        if rel < opts.tol {
            hit_step_limit = false;
            break;
        }
    }
    if obj == 0.0 {
        hit_step_limit = false;
    }
    Ok(WarpPrediction {
        w,
        objective: trace,
        hit_step_limit,
    })
}

/// Cholesky solve, falling back to the minimum-norm solution when the
/// normal matrix is singular (unpenalized anchors over flat image regions).
fn solve_normal(normal: DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = normal.clone().cholesky() {
        let x = chol.solve(rhs);
        if x.iter().all(|v| v.is_finite()) {
            return Ok(x);
        }
    }
    let scale = normal.diagonal().amax().max(f64::MIN_POSITIVE);
    let x = normal
        .svd(true, true)
        .solve(rhs, 1e-12 * scale)
        .map_err(|e| Error::Numerical(format!("warp normal equations: {e}")))?;
    if x.iter().all(|v| v.is_finite()) {
        Ok(x)
    } else {
        Err(Error::Numerical(
            "warp normal equations have no finite solution".into(),
        ))
    }
}

/// Posterior-mode warp for image `y` under the model with factor `f` of
/// `I + S⁻¹` and warp prior `prior`.
pub fn predict_warp(
    y: &Image,
    template: &Image,
    grad: &GradientField,
    f: &CholFactor,
    prior: &WarpPrior,
    w_init: &DisplacementGrid,
    opts: &GaussNewtonOptions,
) -> Result<WarpPrediction> {
    if !(prior.gamma2() > 0.0) {
        return Err(Error::InvalidParameter("gamma2 must be positive".into()));
    }
    gauss_newton_warp(
        y,
        template,
        grad,
        Metric::Intensity(f),
        &prior.precision(),
        w_init,
        opts,
    )
}

/// `S (S + I)⁻¹ (y - theta(v(., w)))`, the predicted intensity field.
pub fn predict_intensity(
    y: &Image,
    template: &Image,
    w_hat: &DisplacementGrid,
    f: &CholFactor,
) -> Result<Image> {
    let r = y.sub(&w_hat.resample(template))?;
    Image::new(*y.lattice(), f.solve(r.values())?)
}

/// Outcome of a variance estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceEstimate {
    pub params: VarianceParams,
    /// Profiled likelihood at `params`.
    pub nll: f64,
    /// Profiled likelihood at the starting point.
    pub initial_nll: f64,
    pub evals: usize,
}

/// Minimizes the profiled linearized likelihood over `(log tau2, log gamma2)`
/// starting from `(tau2, gamma2)`, with the linearization points fixed.
pub fn estimate_variances_from(
    evaluator: &LikelihoodEvaluator,
    tau2: f64,
    gamma2: f64,
    opts: &NelderMeadOptions,
) -> Result<VarianceEstimate> {
    let objective = |x: &[f64]| -> Result<f64> {
        let terms = evaluator.terms(x[0].exp(), x[1].exp())?;
        Ok(terms.profiled()?.1)
    };
    let x0 = [tau2.ln(), gamma2.ln()];
    let initial_nll = objective(&x0)?;
    let min = nelder_mead(objective, &x0, opts)?;
    if !min.f.is_finite() {
        return Err(Error::Estimation("variance optimizer diverged".into()));
    }
    let (tau2, gamma2) = (min.x[0].exp(), min.x[1].exp());
    let sigma2 = evaluator.terms(tau2, gamma2)?.sigma2_hat()?;
    Ok(VarianceEstimate {
        params: VarianceParams::new(sigma2, tau2, gamma2)?,
        nll: min.f,
        initial_nll,
        evals: min.evals,
    })
}

fn build_evaluator(
    data: &[Image],
    template: &Image,
    grad: &GradientField,
    w0s: &[DisplacementGrid],
    solver: &IntensitySolver,
    grid: AnchorGrid,
    mode: LogDetMode,
) -> Result<LikelihoodEvaluator> {
    let images = data
        .par_iter()
        .zip(w0s.par_iter())
        .map(|(y, w0)| LinearizedImage::new(y, template, grad, w0))
        .collect::<Result<Vec<_>>>()?;
    Ok(
        LikelihoodEvaluator::new(images, solver.clone(), WarpPrior::new(1.0, grid)?)?
            .with_mode(mode),
    )
}

/// Variance parameters minimizing the profiled linearized likelihood for
/// fixed linearization points `w0s`.
pub fn estimate_variances(
    data: &[Image],
    template: &Image,
    w0s: &[DisplacementGrid],
    config: &FitConfig,
) -> Result<VarianceEstimate> {
    config.validate()?;
    let lattice = check_lattices(data)?;
    if w0s.len() != data.len() {
        return Err(Error::DimensionMismatch {
            expected: data.len(),
            got: w0s.len(),
        });
    }
    let grid = *w0s[0].grid();
    let solver = IntensitySolver::new(lattice)?;
    let ev = build_evaluator(
        data,
        template,
        &template.gradient(),
        w0s,
        &solver,
        grid,
        config.logdet_mode,
    )?;
    estimate_variances_from(&ev, config.init_tau2, config.init_gamma2, &config.optimizer)
}

/// Runs the alternating estimation on `data`.
pub fn fit(data: &[Image], config: &FitConfig) -> Result<ModelFit> {
    config.validate()?;
    let lattice = check_lattices(data)?;
    if data.len() < 2 {
        return Err(Error::InvalidParameter(
            "fit needs at least two images".into(),
        ));
    }
    if data
        .iter()
        .any(|y| y.values().iter().any(|v| !v.is_finite()))
    {
        return Err(Error::InvalidParameter(
            "images contain non-finite values".into(),
        ));
    }
    let grid = config.warp_grid;
    let solver = IntensitySolver::new(lattice)?;
    let unit_prior = WarpPrior::new(1.0, grid)?;

    let mut warps = vec![DisplacementGrid::zeros(grid); data.len()];
    let mut template = update_template(data, &warps)?;
    let mut grad = template.gradient();
    let (mut tau2, mut gamma2) = (config.init_tau2, config.init_gamma2);
    let mut sigma2 = SIGMA2_FLOOR;
    let mut trace = Vec::with_capacity(config.outer_iters);
    let mut diagnostics = FitDiagnostics::default();

    for outer in 0..config.outer_iters {
        let ev = build_evaluator(
            data,
            &template,
            &grad,
            &warps,
            &solver,
            grid,
            config.logdet_mode,
        )
        .map_err(|e| e.context(format!("outer iteration {}", outer + 1)))?;
        match estimate_variances_from(&ev, tau2, gamma2, &config.optimizer) {
            Ok(est) => {
                (sigma2, tau2, gamma2) = (est.params.sigma2, est.params.tau2, est.params.gamma2);
                diagnostics.estimation_nll.push(est.nll);
                diagnostics.optimizer_evals.push(est.evals);
            }
            Err(Error::DegenerateFit(_)) => {
                diagnostics.degenerate = true;
                diagnostics
                    .estimation_nll
                    .push(ev.terms(tau2, gamma2)?.nll(SIGMA2_FLOOR));
                diagnostics.optimizer_evals.push(1);
            }
            Err(e) => {
                return Err(e.context(format!(
                    "variance estimation, outer iteration {}",
                    outer + 1
                )))
            }
        }

        let f = solver.factor(tau2)?;
        let prior = unit_prior.with_gamma2(gamma2);
        for inner in 0..config.inner_iters {
            let preds = data
                .par_iter()
                .zip(warps.par_iter())
                .map(|(y, w)| {
                    predict_warp(y, &template, &grad, &f, &prior, w, &config.gauss_newton)
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| {
                    e.context(format!(
                        "warp prediction, outer iteration {}, inner iteration {}",
                        outer + 1,
                        inner + 1
                    ))
                })?;
            diagnostics.gauss_newton_limit_hits +=
                preds.iter().filter(|p| p.hit_step_limit).count();
            warps = preds.into_iter().map(|p| p.w).collect();
            if config.center_warps {
                center_warps(&mut warps);
            }
            template = update_template(data, &warps)?;
            grad = template.gradient();
        }

        let ev = build_evaluator(
            data,
            &template,
            &grad,
            &warps,
            &solver,
            grid,
            config.logdet_mode,
        )?;
        let terms = ev.terms(tau2, gamma2)?;
        let value = terms.nll(sigma2);
        if !value.is_finite() {
            return Err(Error::Estimation(format!(
                "likelihood is {value} after outer iteration {}",
                outer + 1
            )));
        }
        trace.push(value);
        if let (Some(tol), [.., a, b]) = (config.early_stop, trace.as_slice()) {
            if (a - b).abs() <= tol * b.abs() {
                break;
            }
        }
    }

    let f = solver.factor(tau2)?;
    let intensities = data
        .par_iter()
        .zip(warps.par_iter())
        .map(|(y, w)| predict_intensity(y, &template, w, &f))
        .collect::<Result<Vec<_>>>()?;
    diagnostics.fold_counts = warps.iter().map(|w| w.fold_count()).collect();
    Ok(ModelFit {
        template,
        params: VarianceParams::new(sigma2, tau2, gamma2)?,
        warps,
        intensities,
        trace,
        diagnostics,
    })
}

/// Removes the mean displacement across images from every grid.
pub fn center_warps(warps: &mut [DisplacementGrid]) {
    let Some(first) = warps.first() else { return };
    let grid = *first.grid();
    let n = warps.len() as f64;
    let mut mean = vec![0.0; grid.dim()];
    for w in warps.iter() {
        for (m, v) in mean.iter_mut().zip(w.as_slice()) {
            *m += v / n;
        }
    }
    for w in warps.iter_mut() {
        let centered = w.as_slice().iter().zip(&mean).map(|(v, m)| v - m).collect();
        *w = DisplacementGrid::from_vec(grid, centered).expect("same grid");
    }
}

/// Warped template plus predicted intensity field for image `index`.
pub fn reconstruct(fit: &ModelFit, index: usize) -> Result<Image> {
    let w = fit.warps.get(index).ok_or_else(|| {
        Error::InvalidParameter(format!(
            "image index {index} out of range for {} images",
            fit.warps.len()
        ))
    })?;
    w.resample(&fit.template).add(&fit.intensities[index])
}

/// Reconstruction of `y` from a template, warp and intensity factor.
pub fn reconstruct_image(
    y: &Image,
    template: &Image,
    w: &DisplacementGrid,
    f: &CholFactor,
) -> Result<Image> {
    w.resample(template)
        .add(&predict_intensity(y, template, w, f)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmrf::{sample_warp, IntensityModel};
    use crate::likelihood::intensity_factor;

    fn smooth(l: Lattice) -> Image {
        Image::from_fn(l, |p| {
            0.5 + 0.2
                * (2.0 * std::f64::consts::PI * p.s).sin()
                * (std::f64::consts::PI * p.t).sin()
                + 0.1 * (3.0 * p.t).cos()
        })
    }

    fn scaled_warp(grid: AnchorGrid, amp: f64, seed: u64) -> DisplacementGrid {
        let d = sample_warp(&WarpPrior::new(1.0, grid).unwrap(), 1.0, seed);
        let s = amp / d.max_abs();
        DisplacementGrid::from_vec(grid, d.as_slice().iter().map(|v| v * s).collect()).unwrap()
    }

    #[test]
    fn template_of_unwarped_images_is_mean() {
        let l = Lattice::new(9, 8).unwrap();
        let grid = AnchorGrid::new(2, 2).unwrap();
        let a = smooth(l);
        let b = a.map(|v| 2.0 * v - 0.1);
        let t = update_template(
            &[a.clone(), b.clone()],
            &vec![DisplacementGrid::zeros(grid); 2],
        )
        .unwrap();
        for r in 0..l.len() {
            assert!((t.values()[r] - 0.5 * (a.values()[r] + b.values()[r])).abs() < 1e-15);
        }
        let same = update_template(
            &[a.clone(), a.clone(), a.clone()],
            &vec![DisplacementGrid::zeros(grid); 3],
        )
        .unwrap();
        for (u, v) in same.values().iter().zip(a.values()) {
            assert!((u - v).abs() < 1e-15);
        }
    }

    #[test]
    fn template_recovered_from_one_warped_image() {
        let l = Lattice::new(48, 48).unwrap();
        let grid = AnchorGrid::new(4, 4).unwrap();
        let theta = smooth(l);
        let w = scaled_warp(grid, 0.03, 1);
        let y = w.resample(&theta);
        let t = update_template(&[y], &[w]).unwrap();
        let err = t
            .values()
            .iter()
            .zip(theta.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 0.02, "max error {err}");
    }

    #[test]
    fn template_is_linear_in_data() {
        let l = Lattice::new(12, 12).unwrap();
        let grid = AnchorGrid::new(3, 3).unwrap();
        let ws = vec![scaled_warp(grid, 0.04, 2), scaled_warp(grid, 0.04, 3)];
        let y1 = vec![smooth(l), smooth(l).map(|v| v * v)];
        let y2 = vec![smooth(l).map(|v| v.sin()), smooth(l).map(|v| 1.0 - v)];
        let combo: Vec<Image> = y1
            .iter()
            .zip(&y2)
            .map(|(a, b)| a.map(|v| 2.0 * v).add(&b.map(|v| -0.5 * v)).unwrap())
            .collect();
        let lhs = update_template(&combo, &ws).unwrap();
        let t1 = update_template(&y1, &ws).unwrap();
        let t2 = update_template(&y2, &ws).unwrap();
        for r in 0..l.len() {
            let rhs = 2.0 * t1.values()[r] - 0.5 * t2.values()[r];
            assert!((lhs.values()[r] - rhs).abs() < 1e-12);
        }
    }

    fn setup(l: Lattice, grid: AnchorGrid, tau2: f64, gamma2: f64) -> (CholFactor, WarpPrior) {
        (
            intensity_factor(&IntensityModel::new(tau2, l).unwrap()).unwrap(),
            WarpPrior::new(gamma2, grid).unwrap(),
        )
    }

    #[test]
    fn warp_of_template_is_zero() {
        let l = Lattice::new(16, 16).unwrap();
        let grid = AnchorGrid::new(3, 3).unwrap();
        let theta = smooth(l);
        let (f, prior) = setup(l, grid, 1.0, 0.1);
        let p = predict_warp(
            &theta,
            &theta,
            &theta.gradient(),
            &f,
            &prior,
            &DisplacementGrid::zeros(grid),
            &Default::default(),
        )
        .unwrap();
        assert_eq!(p.w.max_abs(), 0.0);
    }

    #[test]
    fn warp_prediction_recovers_synthetic_warp() {
        let l = Lattice::new(32, 32).unwrap();
        let grid = AnchorGrid::new(3, 3).unwrap();
        let theta = smooth(l);
        let w_true = scaled_warp(grid, 0.03, 4);
        let y = w_true.resample(&theta);
        let (f, prior) = setup(l, grid, 0.01, 10.0);
        let zero = DisplacementGrid::zeros(grid);
        let p = predict_warp(
            &y,
            &theta,
            &theta.gradient(),
            &f,
            &prior,
            &zero,
            &Default::default(),
        )
        .unwrap();
        for pair in p.objective.windows(2) {
            assert!(pair[1] <= pair[0]);
        }
        let data_term = |w: &DisplacementGrid| {
            let e = y.sub(&w.resample(&theta)).unwrap();
            Metric::Intensity(&f).norm2(e.values()).unwrap()
        };
        assert!(data_term(&p.w) <= 0.1 * data_term(&zero));
        assert!(p.objective.last().unwrap() <= &p.objective[0]);
    }

    #[test]
    fn warp_prediction_shift_equivariant() {
        let l = Lattice::new(20, 20).unwrap();
        let grid = AnchorGrid::new(3, 3).unwrap();
        let theta = smooth(l);
        let y = scaled_warp(grid, 0.03, 5).resample(&theta);
        let (f, prior) = setup(l, grid, 0.5, 1.0);
        let zero = DisplacementGrid::zeros(grid);
        let a = predict_warp(
            &y,
            &theta,
            &theta.gradient(),
            &f,
            &prior,
            &zero,
            &Default::default(),
        )
        .unwrap();
        let ts = theta.map(|v| v + 0.7);
        let b = predict_warp(
            &y.map(|v| v + 0.7),
            &ts,
            &ts.gradient(),
            &f,
            &prior,
            &zero,
            &Default::default(),
        )
        .unwrap();
        for (u, v) in a.w.as_slice().iter().zip(b.w.as_slice()) {
            assert!((u - v).abs() < 1e-8);
        }
    }

    #[test]
    fn vanishing_warp_prior_pins_warps() {
        let l = Lattice::new(20, 20).unwrap();
        let grid = AnchorGrid::new(3, 3).unwrap();
        let theta = smooth(l);
        let y = scaled_warp(grid, 0.05, 6).resample(&theta);
        let (f, prior) = setup(l, grid, 1.0, 1e-10);
        let p = predict_warp(
            &y,
            &theta,
            &theta.gradient(),
            &f,
            &prior,
            &DisplacementGrid::zeros(grid),
            &Default::default(),
        )
        .unwrap();
        assert!(p.w.max_abs() < 1e-4);
    }

    #[test]
    fn intensity_prediction_identities() {
        let l = Lattice::new(10, 11).unwrap();
        let grid = AnchorGrid::new(2, 2).unwrap();
        let theta = smooth(l);
        let model = IntensityModel::new(0.6, l).unwrap();
        let f = intensity_factor(&model).unwrap();
        let w = scaled_warp(grid, 0.03, 7);
        let x0 = predict_intensity(&w.resample(&theta), &theta, &w, &f).unwrap();
        assert!(x0.values().iter().all(|&v| v == 0.0));

        let y = Image::from_fn(l, |p| (4.0 * p.s * p.t).cos());
        let r = y.sub(&w.resample(&theta)).unwrap();
        let x = predict_intensity(&y, &theta, &w, &f).unwrap();
        let back = model.precision_plus_identity().mul_vec(x.values());
        for i in 0..l.len() {
            assert!((back[i] - r.values()[i]).abs() < 1e-8);
        }
        let noise = crate::likelihood::apply_ainv(&f, r.values()).unwrap();
        for i in 0..l.len() {
            assert!((x.values()[i] + noise[i] - r.values()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = FitConfig::default();
        assert_eq!((c.outer_iters, c.inner_iters), (5, 3));
        c.inner_iters = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identical_images_fit_exactly() {
        let l = Lattice::new(12, 12).unwrap();
        let theta = smooth(l);
        let config = FitConfig {
            warp_grid: AnchorGrid::new(2, 2).unwrap(),
            outer_iters: 2,
            inner_iters: 1,
            ..Default::default()
        };
        let fit = fit(&vec![theta.clone(); 4], &config).unwrap();
        for (a, b) in fit.template.values().iter().zip(theta.values()) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(fit.warps.iter().all(|w| w.max_abs() < 1e-10));
        assert!(fit.trace.iter().all(|v| v.is_finite()));
        assert!(fit.diagnostics.degenerate);
    }

    #[test]
    fn fit_rejects_bad_input() {
        let l = Lattice::new(6, 6).unwrap();
        assert!(fit(&[smooth(l)], &FitConfig::default()).is_err());
        let other = Image::zeros(Lattice::new(6, 7).unwrap());
        assert!(matches!(
            fit(&[smooth(l), other], &FitConfig::default()),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
