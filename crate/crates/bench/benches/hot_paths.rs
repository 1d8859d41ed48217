use cosmicq::burstdetect;
use cosmicq::detcal::{self, DepositPdf};
use cosmicq::fluxmc::EnergySampler;
use cosmicq::geometry;
use cosmicq::pipeline::experiment::{self, simulate_streams};
use cosmicq::pipeline::RunConfig;
use cosmicq::Combination;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn transport(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.sampling.detector.sample_count = 20_000;
    let all = Combination::from_indices(0..cfg.scene.prisms.len());
    c.bench_function("sample_and_transport_20k", |b| {
        b.iter(|| geometry::sample_and_transport(&cfg.sampling.detector, &cfg.flux, &cfg.scene, all).unwrap())
    });
}

fn streams(c: &mut Criterion) {
    let mut cfg = RunConfig::default();
    cfg.sampling.chip.sample_count = 100_000;
    let chip = geometry::sample_and_transport(
        &cfg.sampling.chip,
        &cfg.flux,
        &cfg.scene,
        Combination::single(cfg.scene.labels().index_of(&cfg.chip_label).unwrap()),
    )
    .unwrap();
    let chip_xs = experiment::windowed_cross_sections(&cfg, &chip, 1).unwrap();
    let spec = experiment::truth_spec(&cfg, &chip_xs);
    let energies = EnergySampler::new(&cfg.flux);
    c.bench_function("simulate_entry_streams", |b| b.iter(|| simulate_streams(&cfg, &spec, &energies, black_box(0)).unwrap()));

    let s = simulate_streams(&cfg, &spec, &energies, 0).unwrap();
    let series = burstdetect::relaxation_series(&s.shots);
    let template = cfg.detection.template(cfg.timebase.cycle_duration).unwrap();
    c.bench_function("matched_filter_entry", |b| b.iter(|| burstdetect::cross_correlate(black_box(&series), &template)));
}

fn convolution(c: &mut Criterion) {
    let n = detcal::ENERGY_GRID;
    let mass: Vec<f64> = (0..n).map(|i| (-(i as f64) / 200.0).exp()).collect();
    let total: f64 = mass.iter().sum();
    let pdf = DepositPdf { e_max: 80.0, mass: mass.iter().map(|m| m / total).collect(), overflow: 0.0 };
    let params = detcal::reference_responses()[0].clone();
    let edges = detcal::window_edges(&params, 40);
    c.bench_function("bin_probabilities_40", |b| b.iter(|| detcal::bin_probabilities(&pdf, black_box(&params), &edges)));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = transport, streams, convolution
}
criterion_main!(benches);
