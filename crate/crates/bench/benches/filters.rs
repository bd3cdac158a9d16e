use criterion::{criterion_group, criterion_main, Criterion};
use qspectro::filterfn::{filter_function, filter_values_continuous_fast, FrequencyGrid};
use qspectro::modulation::fo_sequence;
use qspectro::reconstruct::{fo_reconstruct, FoOptions, Retention};
use qspectro_bench::{chirp, fo_filters, ocf_grid, overlaps};
use std::hint::black_box;

fn piecewise(c: &mut Criterion) {
    let grid = FrequencyGrid::with_spacing(57.5, 0.005).unwrap();
    let set = fo_sequence(20, 20, 11.5, 5.0).unwrap().into();
    c.bench_function("filter_function fo k=20", |b| b.iter(|| filter_function(black_box(&set), &grid)));
}

fn continuous(c: &mut Criterion) {
    let grid = ocf_grid();
    let m = chirp(5.0);
    c.bench_function("continuous filter 400 samples", |b| {
        b.iter(|| filter_values_continuous_fast(black_box(&m), &grid, 400))
    });
}

fn reconstruct(c: &mut Criterion) {
    let filters = fo_filters(5.0);
    let c_hat = overlaps(&filters, 10.0);
    let sat = vec![false; c_hat.len()];
    let opts = FoOptions {
        omega_c: 10.0,
        omega_max: 11.5,
        retention: Retention::All,
        noise: None,
        clamp_negative: false,
    };
    c.bench_function("fo_reconstruct k=20", |b| {
        b.iter(|| fo_reconstruct(&filters, black_box(&c_hat), &sat, &opts).unwrap())
    });
}

criterion_group!(benches, piecewise, continuous, reconstruct);
criterion_main!(benches);
