//! Simulation from the generative model and comparison with Procrustes-type
//! baselines.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gmrf::{IntensityModel, WarpPrior};
use crate::grid::{Image, Lattice, Point};
use crate::inference::{center_warps, fit, gauss_newton_warp, update_template, FitConfig, Metric};
use crate::warp::{AnchorGrid, DisplacementGrid};

/// Boolean image selecting lattice nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    lattice: Lattice,
    inside: Vec<bool>,
}

impl Mask {
    pub fn new(lattice: Lattice, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != lattice.len() {
            return Err(Error::DimensionMismatch {
                expected: lattice.len(),
                got: inside.len(),
            });
        }
        Ok(Mask { lattice, inside })
    }

    pub fn full(lattice: Lattice) -> Self {
        Mask {
            lattice,
            inside: vec![true; lattice.len()],
        }
    }

    /// Nodes within `radius` of the centre of the unit square.
    pub fn disk(lattice: Lattice, radius: f64) -> Self {
        let inside = lattice
            .points()
            .map(|p| (p.s - 0.5).hypot(p.t - 0.5) <= radius)
            .collect();
        Mask { lattice, inside }
    }

    /// Nodes where `img` exceeds `threshold`.
    pub fn from_image(img: &Image, threshold: f64) -> Self {
        Mask {
            lattice: *img.lattice(),
            inside: img.values().iter().map(|&v| v > threshold).collect(),
        }
    }

    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn contains(&self, r: usize) -> bool {
        self.inside[r]
    }

    pub fn count(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    pub fn to_image(&self) -> Image {
        Image::new(
            self.lattice,
            self.inside
                .iter()
                .map(|&b| if b { 1.0 } else { 0.0 })
                .collect(),
        )
        .expect("lattice-sized mask")
    }
}

/// Radius of the brain disk in [`brain_template`].
pub const BRAIN_RADIUS: f64 = 0.35;

/// Smooth synthetic "brain": a textured disk of radius [`BRAIN_RADIUS`] on a
/// black background, values in `[0, 1]`.
pub fn brain_template(lattice: Lattice) -> Image {
    use std::f64::consts::PI;
    Image::from_fn(lattice, |p| {
        let (ds, dt) = (p.s - 0.5, p.t - 0.5);
        let r = ds.hypot(dt);
        let body = 0.5 * (1.0 - ((r - BRAIN_RADIUS + 0.02) / 0.02).tanh());
        let folds = 0.16 * (2.0 * PI * 3.0 * p.s).sin() * (2.0 * PI * 2.5 * p.t).cos()
            + 0.1 * (2.0 * PI * 4.0 * r).cos();
        let ventricles = 0.3 * (-((ds / 0.05).powi(2) + ((dt.abs() - 0.07) / 0.035).powi(2))).exp();
        (body * (0.6 + folds - ventricles)).clamp(0.0, 1.0)
    })
}

/// Generative-model specification. Variances are absolute scales and may be zero.
#[derive(Debug, Clone)]
pub struct SimSpec {
    pub template: Image,
    pub n: usize,
    pub sigma2: f64,
    pub sigma2_tau2: f64,
    pub sigma2_gamma2: f64,
    pub warp_grid: AnchorGrid,
    /// Nodes receiving the intensity effect; everywhere when `None`.
    pub mask: Option<Mask>,
    pub seed: u64,
}

impl SimSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma2", self.sigma2),
            ("sigma2_tau2", self.sigma2_tau2),
            ("sigma2_gamma2", self.sigma2_gamma2),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if let Some(mask) = &self.mask {
            if mask.lattice() != self.template.lattice() {
                return Err(Error::DimensionMismatch {
                    expected: self.template.lattice().len(),
                    got: mask.lattice().len(),
                });
            }
        }
        Ok(())
    }

    /// Regularization weight matching the true warp variance, `gamma^-2 / 2`.
    pub fn procrustes_lambda(&self) -> f64 {
        if self.sigma2_gamma2 > 0.0 {
            0.5 * self.sigma2 / self.sigma2_gamma2
        } else {
            1e10
        }
    }
}

/// Simulated images with the effects that produced them.
#[derive(Debug, Clone)]
pub struct SimDataset {
    /// Observations, not clamped.
    pub images: Vec<Image>,
    pub warps: Vec<DisplacementGrid>,
    pub intensities: Vec<Image>,
}

/// Draws `n` observations `y = theta(v(., w)) + x + e`. All randomness comes
/// from one stream seeded by `spec.seed`, consumed image by image in the
/// order warp, intensity, noise.
pub fn simulate_dataset(spec: &SimSpec) -> Result<SimDataset> {
    spec.validate()?;
    let lattice = *spec.template.lattice();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let warp_prior = WarpPrior::new(1.0, spec.warp_grid)?;
    let sampler = IntensityModel::new(1.0, lattice)?.sampler()?;
    let noise_sd = spec.sigma2.sqrt();
    let mut out = SimDataset {
        images: Vec::with_capacity(spec.n),
        warps: Vec::with_capacity(spec.n),
        intensities: Vec::with_capacity(spec.n),
    };
    for _ in 0..spec.n {
        let w = warp_prior.sample(spec.sigma2_gamma2, &mut rng);
        let mut x = sampler.sample(spec.sigma2_tau2, &mut rng);
        if let Some(mask) = &spec.mask {
            for (r, v) in x.values_mut().iter_mut().enumerate() {
                if !mask.contains(r) {
                    *v = 0.0;
                }
            }
        }
        let warped = w.resample(&spec.template);
        let values = warped
            .values()
            .iter()
            .zip(x.values())
            .map(|(a, b)| {
                let e: f64 = rng.sample(StandardNormal);
                a + b + noise_sd * e
            })
            .collect();
        out.images.push(Image::new(lattice, values)?);
        out.warps.push(w);
        out.intensities.push(x);
    }
    Ok(out)
}

/// Template ignoring warps: the pointwise mean.
pub fn fit_pointwise(data: &[Image]) -> Result<Image> {
    let zeros = vec![DisplacementGrid::zeros(AnchorGrid::new(1, 1)?); data.len()];
    update_template(data, &zeros)
}

/// Result of a Procrustes fit.
#[derive(Debug, Clone)]
pub struct ProcrustesFit {
    pub template: Image,
    pub warps: Vec<DisplacementGrid>,
    /// Mean squared residual of the final fit.
    pub sigma2: f64,
    /// Summed objective after each outer iteration.
    pub trace: Vec<f64>,
}

/// Procrustes baseline: warps are parameters estimated by minimizing
/// `‖y - theta(v(., w))‖² + lambda wᵀ C1⁻¹ w` with `C1` the unit-scale warp
/// kernel, alternated with template updates. `lambda = 0` is the free warp.
pub fn fit_procrustes(data: &[Image], lambda: f64, config: &FitConfig) -> Result<ProcrustesFit> {
    config.validate()?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "lambda must be nonnegative, got {lambda}"
        )));
    }
    use rayon::prelude::*;
    let grid = config.warp_grid;
    let penalty = WarpPrior::new(1.0, grid)?.unit_precision() * lambda;
    let mut warps = vec![DisplacementGrid::zeros(grid); data.len()];
    let mut template = update_template(data, &warps)?;
    let lattice = *template.lattice();
    let mut trace = Vec::with_capacity(config.outer_iters);
    for _ in 0..config.outer_iters {
        let mut total = 0.0;
        for _ in 0..config.inner_iters {
            let grad = template.gradient();
            let preds = data
                .par_iter()
                .zip(warps.par_iter())
                .map(|(y, w)| {
                    gauss_newton_warp(
                        y,
                        &template,
                        &grad,
                        Metric::Identity,
                        &penalty,
                        w,
                        &config.gauss_newton,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            total = preds
                .iter()
                .map(|p| *p.objective.last().expect("nonempty"))
                .sum();
            warps = preds.into_iter().map(|p| p.w).collect();
            if config.center_warps {
                center_warps(&mut warps);
            }
            template = update_template(data, &warps)?;
        }
        trace.push(total);
    }
    let rss: f64 = data
        .iter()
        .zip(&warps)
        .map(|(y, w)| {
            let fitted = w.resample(&template);
            y.values()
                .iter()
                .zip(fitted.values())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(ProcrustesFit {
        template,
        warps,
        sigma2: rss / (data.len() * lattice.len()) as f64,
        trace,
    })
}

/// Mean squared pixel difference.
pub fn template_mse(est: &Image, truth: &Image) -> Result<f64> {
    let d = est.sub(truth)?;
    Ok(d.values().iter().map(|v| v * v).sum::<f64>() / d.values().len() as f64)
}

/// Mean over images and masked lattice nodes of the squared Euclidean
/// distance between estimated and true displacement fields.
pub fn warp_mse(est: &[DisplacementGrid], truth: &[DisplacementGrid], mask: &Mask) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: est.len(),
        });
    }
    let count = mask.count();
    if count == 0 {
        return Err(Error::InvalidParameter(
            "warp MSE over an empty mask".into(),
        ));
    }
    if est.is_empty() {
        return Err(Error::InvalidParameter("no warps".into()));
    }
    let lattice = *mask.lattice();
    let points: Vec<Point> = (0..lattice.len())
        .filter(|&r| mask.contains(r))
        .map(|r| lattice.point_at(r))
        .collect();
    let mut total = 0.0;
    for (a, b) in est.iter().zip(truth) {
        for &p in &points {
            let (as_, at) = a.displacement(p);
            let (bs, bt) = b.displacement(p);
            total += (as_ - bs).powi(2) + (at - bt).powi(2);
        }
    }
    Ok(total / (count * est.len()) as f64)
}

/// Methods compared by [`benchmark`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Proposed,
    ProcrustesFree,
    ProcrustesRegularized,
    Pointwise,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::Proposed,
        Method::ProcrustesFree,
        Method::ProcrustesRegularized,
        Method::Pointwise,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Proposed => "proposed",
            Method::ProcrustesFree => "procrustes_free",
            Method::ProcrustesRegularized => "procrustes_reg",
            Method::Pointwise => "pointwise",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown method {s:?}")))
    }
}

/// One method on one repetition. Variance columns the method does not
/// estimate are `None`; all metrics are `None` when the fit failed.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub rep: usize,
    pub method: Method,
    pub failed: bool,
    pub template_mse: Option<f64>,
    pub warp_mse: Option<f64>,
    pub sigma2: Option<f64>,
    pub sigma2_tau2: Option<f64>,
    pub sigma2_gamma2: Option<f64>,
    pub seconds: f64,
}

pub const BENCH_HEADER: &str =
    "rep,method,template_mse,warp_mse,sigma2,sigma2_tau2,sigma2_gamma2,seconds";

fn opt(v: Option<f64>) -> String {
    match v {
        None => String::new(),
        Some(x) if x == 0.0 || (1e-4..1e6).contains(&x.abs()) => x.to_string(),
        Some(x) => format!("{x:e}"),
    }
}

impl BenchRow {
    pub fn csv_line(&self, with_seconds: bool) -> String {
        let method = if self.failed {
            format!("{}!failed", self.method.name())
        } else {
            self.method.name().to_string()
        };
        let secs = if with_seconds {
            format!("{:.3}", self.seconds)
        } else {
            String::new()
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.rep,
            method,
            opt(self.template_mse),
            opt(self.warp_mse),
            opt(self.sigma2),
            opt(self.sigma2_tau2),
            opt(self.sigma2_gamma2),
            secs
        )
    }
}

/// Benchmark CSV. Warp MSE is the per-node mean inside the mask, averaged
/// over images. Leaving out timings makes the output reproducible byte for byte.
pub fn bench_csv(rows: &[BenchRow], with_seconds: bool) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for row in rows {
        let _ = writeln!(out, "{}", row.csv_line(with_seconds));
    }
    out
}

fn run_method(
    method: Method,
    data: &SimDataset,
    spec: &SimSpec,
    config: &FitConfig,
    mask: &Mask,
) -> Result<BenchRow> {
    let start = Instant::now();
    let mut row = BenchRow {
        rep: 0,
        method,
        failed: false,
        template_mse: None,
        warp_mse: None,
        sigma2: None,
        sigma2_tau2: None,
        sigma2_gamma2: None,
        seconds: 0.0,
    };
    let (template, warps) = match method {
        Method::Proposed => {
            let f = fit(&data.images, config)?;
            row.sigma2 = Some(f.params.sigma2);
            row.sigma2_tau2 = Some(f.params.sigma2_tau2());
            row.sigma2_gamma2 = Some(f.params.sigma2_gamma2());
            (f.template, f.warps)
        }
        Method::ProcrustesFree | Method::ProcrustesRegularized => {
            let lambda = if method == Method::ProcrustesFree {
                0.0
            } else {
                spec.procrustes_lambda()
            };
            let f = fit_procrustes(&data.images, lambda, config)?;
            row.sigma2 = Some(f.sigma2);
            (f.template, f.warps)
        }
        Method::Pointwise => {
            let t = fit_pointwise(&data.images)?;
            (
                t,
                vec![DisplacementGrid::zeros(config.warp_grid); data.images.len()],
            )
        }
    };
    row.template_mse = Some(template_mse(&template, &spec.template)?);
    row.warp_mse = Some(warp_mse(&warps, &data.warps, mask)?);
    row.seconds = start.elapsed().as_secs_f64();
    Ok(row)
}

/// Simulates `repetitions` datasets (seed `spec.seed + rep`) and fits every
/// method to each. Fit failures become rows flagged as failed. Warp MSE uses
/// the simulation mask, or the whole lattice without one.
pub fn benchmark(
    spec: &SimSpec,
    repetitions: usize,
    methods: &[Method],
    config: &FitConfig,
) -> Result<Vec<BenchRow>> {
    if repetitions == 0 {
        return Err(Error::InvalidParameter(
            "repetitions must be at least 1".into(),
        ));
    }
    spec.validate()?;
    config.validate()?;
    let mask = spec
        .mask
        .clone()
        .unwrap_or_else(|| Mask::full(*spec.template.lattice()));
    let mut rows = Vec::with_capacity(repetitions * methods.len());
    for rep in 0..repetitions {
        let rep_spec = SimSpec {
            seed: spec.seed.wrapping_add(rep as u64),
            ..spec.clone()
        };
        let data = simulate_dataset(&rep_spec)?;
        for &method in methods {
            let start = Instant::now();
            let row = match run_method(method, &data, &rep_spec, config, &mask) {
                Ok(row) => row,
                Err(_) => BenchRow {
                    rep,
                    method,
                    failed: true,
                    template_mse: None,
                    warp_mse: None,
                    sigma2: None,
                    sigma2_tau2: None,
                    sigma2_gamma2: None,
                    seconds: start.elapsed().as_secs_f64(),
                },
            };
            rows.push(BenchRow { rep, ..row });
        }
    }
    Ok(rows)
}
