use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Axis;
use pstnet::geom::farthest_point_sample;
use pstnet::tube::build_tube;
use pstnet::{PstConv, PstTrans, Sampling, TubeSpec};
use pstnet_bench::random_sequence;

fn fps(c: &mut Criterion) {
    let mut group = c.benchmark_group("fps");
    for n in [256, 1024, 2048] {
        let (coords, _) = random_sequence(1, n, 0, 1.0, 0);
        let frame = coords.index_axis(Axis(0), 0).to_owned();
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, &n| {
            b.iter(|| farthest_point_sample(frame.view(), n / 4, Sampling::Deterministic).unwrap())
        });
    }
    group.finish();
}

fn tube(c: &mut Criterion) {
    let (coords, _) = random_sequence(16, 1024, 0, 1.0, 1);
    let spec = TubeSpec::new(3, 2, [1, 1], 4, 0.1, Some(9));
    c.bench_function("tube/16x1024", |b| b.iter(|| build_tube(black_box(coords.view()), &spec, Sampling::Deterministic).unwrap()));
}

fn conv(c: &mut Criterion) {
    let (coords, feats) = random_sequence(16, 512, 32, 1.0, 2);
    let mut rng = pstnet::rng::rng(3);
    let spec = TubeSpec::new(3, 2, [1, 1], 2, 0.15, Some(9));
    let conv = PstConv::init(spec.clone(), 32, 64, 64, true, 1.0, &mut rng).unwrap();
    c.bench_function("pstconv/forward", |b| {
        b.iter(|| conv.forward(coords.view(), feats.view(), Sampling::Deterministic).unwrap())
    });
    let io = conv.forward(coords.view(), feats.view(), Sampling::Deterministic).unwrap();
    let grad = io.out_feats.mapv(|v| v.signum());
    c.bench_function("pstconv/backward", |b| b.iter(|| conv.backward(&io, grad.view()).unwrap()));

    let trans = PstTrans::init(spec, 64, 32, 32, 1.0, &mut rng).unwrap();
    c.bench_function("psttrans/forward", |b| {
        b.iter(|| trans.forward(io.out_coords.view(), io.out_feats.view(), coords.view()).unwrap())
    });
}

criterion_group!(benches, fps, tube, conv);
criterion_main!(benches);
