use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use warpmix::inference::{predict_intensity, predict_warp, GaussNewtonOptions};
use warpmix::io::{read_image, read_raw_f32, write_image, write_raw_f32};
use warpmix::sim::{self, brain_template, Mask, SimSpec};
use warpmix::{DisplacementGrid, Image, IntensitySolver, Lattice, WarpPrior};

use crate::config::RunConfig;
use crate::{InputError, UsageError};

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into())
}

/// Expands a single directory argument into its sorted image files.
fn input_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if let [dir] = inputs {
        if dir.is_dir() {
            let mut files = Vec::new();
            for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
                let path = entry?.path();
                if path.is_file() && is_image(&path) {
                    files.push(path);
                }
            }
            files.sort();
            return Ok(files);
        }
    }
    for p in inputs {
        if !p.is_file() {
            bail!(InputError(format!("input {} does not exist", p.display())));
        }
    }
    Ok(inputs.to_vec())
}

/// Reads an image file, or a raw float field for `.f32` paths.
fn load_field(path: &Path) -> Result<Image> {
    let is_raw = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("f32"));
    let img = if is_raw {
        read_raw_f32(path)?
    } else {
        read_image(path)?
    };
    Ok(img)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn mask_for(cfg: &RunConfig, lattice: Lattice) -> Result<Option<Mask>> {
    if let Some(path) = &cfg.mask_path {
        let img = load_field(path)?;
        if *img.lattice() != lattice {
            bail!(InputError(format!(
                "mask {} does not match the template size",
                path.display()
            )));
        }
        return Ok(Some(Mask::from_image(&img, 0.5)));
    }
    Ok(cfg.mask_radius.map(|r| Mask::disk(lattice, r)))
}

fn sim_template(input: Option<&Path>, cfg: &RunConfig) -> Result<(Image, String)> {
    match input.or(cfg.template_path.as_deref()) {
        Some(path) => Ok((load_field(path)?, path.display().to_string())),
        None => {
            let lattice = Lattice::new(cfg.size.0, cfg.size.1)?;
            Ok((brain_template(lattice), "synthetic".into()))
        }
    }
}

fn sim_spec(input: Option<&Path>, cfg: &RunConfig) -> Result<(SimSpec, String)> {
    let (template, source) = sim_template(input, cfg)?;
    let mask = mask_for(cfg, *template.lattice())?;
    let spec = SimSpec {
        template,
        n: cfg.n,
        sigma2: cfg.sigma2,
        sigma2_tau2: cfg.sigma2_tau2,
        sigma2_gamma2: cfg.sigma2_gamma2,
        warp_grid: cfg.anchor_grid()?,
        mask,
        seed: cfg.seed,
    };
    Ok((spec, source))
}

pub fn fit(inputs: &[PathBuf], cfg: &RunConfig) -> Result<()> {
    let fit_config = cfg.fit_config()?;
    let files = input_files(inputs)?;
    if files.len() < 2 {
        bail!(InputError(format!(
            "fit needs at least two images, found {}",
            files.len()
        )));
    }
    let mut stems = BTreeMap::new();
    let mut images = Vec::with_capacity(files.len());
    for path in &files {
        let img = read_image(path)?;
        if let Some(first) = images.first() {
            let first: &Image = first;
            if first.lattice() != img.lattice() {
                bail!(InputError(format!(
                    "{} is {}x{}, expected {}x{}",
                    path.display(),
                    img.lattice().rows(),
                    img.lattice().cols(),
                    first.lattice().rows(),
                    first.lattice().cols()
                )));
            }
        }
        if let Some(prev) = stems.insert(stem(path), path.clone()) {
            bail!(UsageError(format!(
                "{} and {} share a file stem",
                prev.display(),
                path.display()
            )));
        }
        images.push(img);
    }

    let result = warpmix::fit(&images, &fit_config)?;

    let out = &cfg.output_dir;
    for sub in ["warps", "intensity", "reconstructions"] {
        create_dir(&out.join(sub))?;
    }
    write_image(&result.template, out.join("template.pgm"))?;
    write_raw_f32(&result.template, out.join("template.f32"))?;
    let p = &result.params;
    let nll_final = result.trace.last().copied().unwrap_or(f64::NAN);
    let params = format!(
        "sigma2 = {}\nsigma2_tau2 = {}\nsigma2_gamma2 = {}\nnll_final = {}\nwarp_grid = {}x{}\n",
        p.sigma2,
        p.sigma2_tau2(),
        p.sigma2_gamma2(),
        nll_final,
        fit_config.warp_grid.rows(),
        fit_config.warp_grid.cols()
    );
    write_text(&out.join("params.txt"), &params)?;
    let mut trace = String::from("outer_iter,nll\n");
    for (i, v) in result.trace.iter().enumerate() {
        let _ = writeln!(trace, "{},{}", i + 1, v);
    }
    write_text(&out.join("trace.csv"), &trace)?;
    for (i, path) in files.iter().enumerate() {
        let name = stem(path);
        result.warps[i].write_csv(out.join("warps").join(format!("{name}.csv")))?;
        write_raw_f32(
            &result.intensities[i],
            out.join("intensity").join(format!("{name}.f32")),
        )?;
        write_image(
            &result.reconstruct(i)?,
            out.join("reconstructions").join(format!("{name}.pgm")),
        )?;
    }
    let folds: usize = result.diagnostics.fold_counts.iter().sum();
    if folds > 0 {
        eprintln!("warning: {folds} folded cells in predicted warps");
    }
    println!(
        "fitted {} images: sigma2 = {}, sigma2_tau2 = {}, sigma2_gamma2 = {}, nll = {}",
        images.len(),
        p.sigma2,
        p.sigma2_tau2(),
        p.sigma2_gamma2(),
        nll_final
    );
    Ok(())
}

pub fn simulate(input: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let (spec, source) = sim_spec(input, cfg)?;
    let out = &cfg.output_dir;
    create_dir(out)?;
    let lattice = *spec.template.lattice();
    let mut manifest = format!(
        "seed = {}\nn = {}\nsize = {}x{}\nwarp_grid = {}x{}\nsigma2 = {}\nsigma2_tau2 = {}\nsigma2_gamma2 = {}\ntemplate = {}\nmask = {}\n",
        spec.seed,
        spec.n,
        lattice.rows(),
        lattice.cols(),
        spec.warp_grid.rows(),
        spec.warp_grid.cols(),
        spec.sigma2,
        spec.sigma2_tau2,
        spec.sigma2_gamma2,
        source,
        match (&cfg.mask_path, cfg.mask_radius) {
            (Some(p), _) => p.display().to_string(),
            (None, Some(r)) => format!("disk {r}"),
            (None, None) => "none".into(),
        }
    );
    if spec.n > 0 {
        let data = sim::simulate_dataset(&spec)?;
        for sub in ["images", "true_warps", "true_intensity"] {
            create_dir(&out.join(sub))?;
        }
        for i in 0..spec.n {
            let name = format!("sim_{i:04}");
            write_image(
                &data.images[i],
                out.join("images").join(format!("{name}.pgm")),
            )?;
            data.warps[i].write_csv(out.join("true_warps").join(format!("{name}.csv")))?;
            write_raw_f32(
                &data.intensities[i],
                out.join("true_intensity").join(format!("{name}.f32")),
            )?;
            let _ = writeln!(manifest, "image = images/{name}.pgm");
        }
    }
    write_text(&out.join("manifest.txt"), &manifest)?;
    println!("wrote {} images to {}", spec.n, out.display());
    Ok(())
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[k]
    } else {
        0.5 * (v[k - 1] + v[k])
    })
}

pub fn benchmark(cfg: &RunConfig) -> Result<()> {
    let fit_config = cfg.fit_config()?;
    let (spec, _) = sim_spec(None, cfg)?;
    if cfg.reps == 0 {
        bail!(UsageError("reps must be at least 1".into()));
    }
    let rows = sim::benchmark(&spec, cfg.reps, &cfg.methods, &fit_config)?;
    create_dir(&cfg.output_dir)?;
    write_text(
        &cfg.output_dir.join("bench.csv"),
        &sim::bench_csv(&rows, cfg.timing),
    )?;
    println!("method,median_template_mse,median_warp_mse,failures");
    for m in &cfg.methods {
        let mine: Vec<_> = rows.iter().filter(|r| r.method == *m).collect();
        let fmt = |x: Option<f64>| x.map_or_else(|| "NA".to_string(), |v| format!("{v:.6e}"));
        println!(
            "{},{},{},{}",
            m.name(),
            fmt(median(mine.iter().filter_map(|r| r.template_mse).collect())),
            fmt(median(mine.iter().filter_map(|r| r.warp_mse).collect())),
            mine.iter().filter(|r| r.failed).count()
        );
    }
    if rows.iter().all(|r| r.failed) {
        bail!(warpmix::Error::Estimation(
            "every benchmark repetition failed".into()
        ));
    }
    Ok(())
}

struct FittedParams {
    sigma2: f64,
    sigma2_tau2: f64,
    sigma2_gamma2: f64,
    warp_grid: (usize, usize),
}

fn read_params(path: &Path) -> Result<FittedParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let bad = |msg: String| InputError(format!("{}: {msg}", path.display()));
    let mut values = BTreeMap::new();
    for line in text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
    {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("malformed line {line:?}")))?;
        values.insert(k.trim().to_string(), v.trim().to_string());
    }
    let number = |key: &str| -> Result<f64> {
        let v = values
            .get(key)
            .ok_or_else(|| bad(format!("missing {key}")))?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() && x > 0.0 => Ok(x),
            _ => Err(bad(format!("{key} must be a positive number, got {v:?}")).into()),
        }
    };
    let grid = values
        .get("warp_grid")
        .and_then(|g| g.split_once('x'))
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| bad("missing or malformed warp_grid".into()))?;
    Ok(FittedParams {
        sigma2: number("sigma2")?,
        sigma2_tau2: number("sigma2_tau2")?,
        sigma2_gamma2: number("sigma2_gamma2")?,
        warp_grid: grid,
    })
}

pub fn predict(
    input: &Path,
    template_path: &Path,
    params_path: &Path,
    cfg: &RunConfig,
) -> Result<()> {
    let params = read_params(params_path)?;
    let template = load_field(template_path)?;
    let y = load_field(input)?;
    if y.lattice() != template.lattice() {
        bail!(InputError(format!(
            "{} does not match the template size",
            input.display()
        )));
    }
    let grid = warpmix::AnchorGrid::new(params.warp_grid.0, params.warp_grid.1)
        .map_err(|e| InputError(format!("{}: {e}", params_path.display())))?;
    let tau2 = params.sigma2_tau2 / params.sigma2;
    let gamma2 = params.sigma2_gamma2 / params.sigma2;

    let solver = IntensitySolver::new(*template.lattice())?;
    let f = solver.factor(tau2)?;
    let prior = WarpPrior::new(gamma2, grid)?;
    let grad = template.gradient();
    let pred = predict_warp(
        &y,
        &template,
        &grad,
        &f,
        &prior,
        &DisplacementGrid::zeros(grid),
        &GaussNewtonOptions::default(),
    )?;
    let x = predict_intensity(&y, &template, &pred.w, &f)?;
    let recon = pred.w.resample(&template).add(&x)?;
    let residual = y
        .values()
        .iter()
        .zip(recon.values())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let out = &cfg.output_dir;
    for sub in ["warps", "intensity", "reconstructions"] {
        create_dir(&out.join(sub))?;
    }
    let name = stem(input);
    pred.w
        .write_csv(out.join("warps").join(format!("{name}.csv")))?;
    write_raw_f32(&x, out.join("intensity").join(format!("{name}.f32")))?;
    write_image(
        &recon,
        out.join("reconstructions").join(format!("{name}.pgm")),
    )?;
    println!("max_abs_residual = {residual:e}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use warpmix::sim::Method;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![]), None);
        assert_eq!(median(vec![3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn params_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.txt");
        fs::write(&path, "sigma2 = 0.5\nsigma2_tau2 = 1\nsigma2_gamma2 = 0.25\nnll_final = -3\nwarp_grid = 3x2\n").unwrap();
        let p = read_params(&path).unwrap();
        assert_eq!(
            (p.sigma2, p.sigma2_tau2, p.sigma2_gamma2, p.warp_grid),
            (0.5, 1.0, 0.25, (3, 2))
        );
        for bad in [
            "sigma2 = x\n",
            "sigma2 = 1\nsigma2_tau2 = 1\nsigma2_gamma2 = 1\n",
            "garbage",
        ] {
            fs::write(&path, bad).unwrap();
            assert!(read_params(&path).is_err(), "{bad}");
        }
    }

    #[test]
    fn image_extension_filter() {
        assert!(is_image(Path::new("a/b.PGM")));
        assert!(is_image(Path::new("x.png")));
        assert!(!is_image(Path::new("x.csv")));
        assert_eq!(stem(Path::new("dir/face_01.pgm")), "face_01");
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }
}
