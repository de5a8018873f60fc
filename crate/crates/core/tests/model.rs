use proptest::prelude::*;
use warpmix::inference::{center_warps, update_template};
use warpmix::io::{read_image, read_raw_f32, write_image, write_raw_f32};
use warpmix::likelihood::{nll_with, LogDetMode};
use warpmix::sim::{brain_template, simulate_dataset, Mask, SimSpec, BRAIN_RADIUS};
use warpmix::{fit, AnchorGrid, DisplacementGrid, FitConfig, Image, Lattice, VarianceParams};

fn small_spec(seed: u64) -> SimSpec {
    let l = Lattice::new(24, 24).unwrap();
    SimSpec {
        template: brain_template(l),
        n: 6,
        sigma2: 0.001,
        sigma2_tau2: 0.1,
        sigma2_gamma2: 0.01,
        warp_grid: AnchorGrid::new(3, 3).unwrap(),
        mask: Some(Mask::disk(l, BRAIN_RADIUS)),
        seed,
    }
}

fn small_config() -> FitConfig {
    FitConfig {
        warp_grid: AnchorGrid::new(3, 3).unwrap(),
        outer_iters: 3,
        inner_iters: 2,
        ..Default::default()
    }
}

#[test]
fn fit_on_simulated_stack() {
    let spec = small_spec(21);
    let data = simulate_dataset(&spec).unwrap();
    let result = fit(&data.images, &small_config()).unwrap();
    assert_eq!(result.trace.len(), 3);
    assert_eq!(result.warps.len(), 6);
    let (first, last) = (result.trace[0], *result.trace.last().unwrap());
    assert!(last <= first + 1e-6 * first.abs(), "{:?}", result.trace);
    let p = result.params;
    assert!(p.sigma2 > 0.0 && p.tau2 > 0.0 && p.gamma2 > 0.0);

    // reconstructions explain most of the variation around the template
    for i in 0..data.images.len() {
        let rec = result.reconstruct(i).unwrap();
        let direct = result.warps[i]
            .resample(&result.template)
            .add(&result.intensities[i])
            .unwrap();
        assert_eq!(rec, direct);
        let y = &data.images[i];
        let resid: f64 = y
            .values()
            .iter()
            .zip(rec.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        let spread: f64 = y
            .values()
            .iter()
            .zip(result.template.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        assert!(resid < spread, "image {i}: {resid} vs {spread}");
    }
}

#[test]
fn fit_warps_are_centered() {
    let data = simulate_dataset(&small_spec(22)).unwrap();
    let result = fit(&data.images, &small_config()).unwrap();
    let q = result.warps[0].as_slice().len();
    for j in 0..q {
        let mean: f64 =
            result.warps.iter().map(|w| w.as_slice()[j]).sum::<f64>() / result.warps.len() as f64;
        assert!(mean.abs() < 1e-12);
    }
}

#[test]
fn centering_removes_the_mean() {
    let grid = AnchorGrid::new(2, 3).unwrap();
    let mut warps: Vec<_> = (0..3)
        .map(|i| {
            DisplacementGrid::from_vec(
                grid,
                (0..grid.dim())
                    .map(|j| (i * j) as f64 * 0.01 + 0.02)
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let before = warps.clone();
    center_warps(&mut warps);
    for j in 0..grid.dim() {
        let mean: f64 = warps.iter().map(|w| w.as_slice()[j]).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-15);
        let diffs: Vec<f64> = warps
            .iter()
            .zip(&before)
            .map(|(a, b)| a.as_slice()[j] - b.as_slice()[j])
            .collect();
        assert!(diffs.iter().all(|d| (d - diffs[0]).abs() < 1e-15));
    }
    let mut empty: Vec<DisplacementGrid> = Vec::new();
    center_warps(&mut empty);
}

#[test]
fn image_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let l = Lattice::new(7, 5).unwrap();
    let img = Image::from_fn(l, |p| p.s * p.t + 0.1);
    write_image(&img, dir.path().join("a.pgm")).unwrap();
    write_image(&img, dir.path().join("a.png")).unwrap();
    for name in ["a.pgm", "a.png"] {
        let back = read_image(dir.path().join(name)).unwrap();
        assert_eq!(back.lattice(), &l);
        for (a, b) in back.values().iter().zip(img.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
    let signed = img.map(|v| v - 0.4);
    write_raw_f32(&signed, dir.path().join("a.f32")).unwrap();
    let back = read_raw_f32(dir.path().join("a.f32")).unwrap();
    for (a, b) in back.values().iter().zip(signed.values()) {
        assert_eq!(*a, *b as f32 as f64);
    }
}

#[test]
fn template_is_linear_in_data() {
    let spec = small_spec(23);
    let d1 = simulate_dataset(&spec).unwrap();
    let d2 = simulate_dataset(&SimSpec { seed: 24, ..spec }).unwrap();
    let (a, b) = (0.7, -1.3);
    let mixed: Vec<Image> = d1
        .images
        .iter()
        .zip(&d2.images)
        .map(|(x, y)| {
            Image::new(
                *x.lattice(),
                x.values()
                    .iter()
                    .zip(y.values())
                    .map(|(u, v)| a * u + b * v)
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let t = update_template(&mixed, &d1.warps).unwrap();
    let t1 = update_template(&d1.images, &d1.warps).unwrap();
    let t2 = update_template(&d2.images, &d1.warps).unwrap();
    for i in 0..t.values().len() {
        assert!((t.values()[i] - (a * t1.values()[i] + b * t2.values()[i])).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn nll_ignores_common_offset(c in -2.0f64..2.0, seed in 0u64..50, s2 in 0.01f64..1.0, t2 in 0.1f64..10.0, g2 in 0.1f64..10.0) {
        let l = Lattice::new(10, 9).unwrap();
        let grid = AnchorGrid::new(2, 2).unwrap();
        let template = Image::from_fn(l, |p| 0.4 + 0.3 * (3.0 * p.s).sin() * p.t);
        let data: Vec<Image> = (0..2u64)
            .map(|i| Image::from_fn(l, |p| 0.5 + 0.2 * ((seed + i) as f64 * p.s + p.t).cos()))
            .collect();
        let w0s: Vec<_> = (0..2)
            .map(|i| DisplacementGrid::from_vec(grid, (0..8).map(|j| 0.01 * ((i * 8 + j) as f64 + seed as f64).sin()).collect()).unwrap())
            .collect();
        let params = VarianceParams::new(s2, t2, g2).unwrap();
        let base = nll_with(&data, &template, &w0s, &params, LogDetMode::Exact).unwrap();
        let shifted: Vec<Image> = data.iter().map(|y| y.map(|v| v + c)).collect();
        let moved = nll_with(&shifted, &template.map(|v| v + c), &w0s, &params, LogDetMode::Exact).unwrap();
        prop_assert!((base - moved).abs() <= 1e-8 * base.abs().max(1.0));
    }
}
