use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use warpmix::inference::{predict_warp, update_template, GaussNewtonOptions};
use warpmix::likelihood::{LikelihoodEvaluator, LinearizedImage};
use warpmix::{AnchorGrid, DisplacementGrid, IntensitySolver, WarpPrior};
use warpmix_bench::study_data;

fn factorization(c: &mut Criterion) {
    let mut group = c.benchmark_group("factor");
    for size in [32, 64, 128] {
        let data = study_data(size, 1, 4, 1);
        let solver = IntensitySolver::new(*data.images[0].lattice()).unwrap();
        group.bench_with_input(BenchmarkId::from_parameter(size), &solver, |b, s| {
            b.iter(|| s.factor(10.0).unwrap())
        });
    }
    group.finish();
}

fn likelihood(c: &mut Criterion) {
    let grid = AnchorGrid::new(4, 4).unwrap();
    let data = study_data(64, 10, 4, 2);
    let w0 = vec![DisplacementGrid::zeros(grid); data.images.len()];
    let template = update_template(&data.images, &w0).unwrap();
    let grad = template.gradient();
    let images = data
        .images
        .iter()
        .zip(&w0)
        .map(|(y, w)| LinearizedImage::new(y, &template, &grad, w).unwrap())
        .collect();
    let ev = LikelihoodEvaluator::new(
        images,
        IntensitySolver::new(*template.lattice()).unwrap(),
        WarpPrior::new(1.0, grid).unwrap(),
    )
    .unwrap();
    c.bench_function("likelihood_64x64_n10", |b| {
        b.iter(|| ev.terms(100.0, 10.0).unwrap())
    });
}

fn warp_prediction(c: &mut Criterion) {
    let grid = AnchorGrid::new(4, 4).unwrap();
    let data = study_data(64, 2, 4, 3);
    let template = update_template(&data.images, &vec![DisplacementGrid::zeros(grid); 2]).unwrap();
    let grad = template.gradient();
    let f = IntensitySolver::new(*template.lattice())
        .unwrap()
        .factor(100.0)
        .unwrap();
    let prior = WarpPrior::new(10.0, grid).unwrap();
    let zeros = DisplacementGrid::zeros(grid);
    let opts = GaussNewtonOptions::default();
    c.bench_function("predict_warp_64x64", |b| {
        b.iter(|| {
            predict_warp(&data.images[0], &template, &grad, &f, &prior, &zeros, &opts).unwrap()
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = factorization, likelihood, warp_prediction
}
criterion_main!(benches);
