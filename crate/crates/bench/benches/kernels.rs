use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use std::hint::black_box;

use mflab_core::energy::EnergyContext;
use mflab_core::flow::FlowMatrix;
use mflab_core::grid::{GridDensity, InitialLaw};
use mflab_core::pde::{step_pde, PdeConfig};
use mflab_core::potentials::{PotentialSpec, SmearingRadius, TruncationParams};
use mflab_core::sde::{drift, init_particles};
use mflab_core::spectral::{FreeSpaceConv, KernelField};

fn spec() -> PotentialSpec {
    PotentialSpec::riesz(0.5, 3).unwrap()
}

fn bench_pair_drift(c: &mut Criterion) {
    let sp = spec();
    let flow = FlowMatrix::neg_identity(3);
    let trunc = TruncationParams::new(1e-3).unwrap();
    for n in [64usize, 256] {
        let state = init_particles(&InitialLaw::standard(), n, 1).unwrap();
        c.bench_function(&format!("drift_direct_n{n}"), |b| {
            b.iter(|| {
                black_box(
                    drift(state.positions.view(), &sp, &trunc, &flow, 1.0).unwrap(),
                )
            })
        });
    }
}

fn bench_freespace_convolution(c: &mut Criterion) {
    let sp = spec();
    let mu = GridDensity::from_law(&InitialLaw::standard(), 12.0, 32).unwrap();
    let conv = FreeSpaceConv::new(sp, 32, 12.0);
    // warm the kernel cache so the benchmark measures the transform path
    let _ = conv.convolve(KernelField::Value, &mu.values);
    c.bench_function("freespace_convolution_n32", |b| {
        b.iter(|| black_box(conv.convolve(KernelField::Value, &mu.values)))
    });
}

fn bench_modulated_energy(c: &mut Criterion) {
    let sp = spec();
    let mu = GridDensity::from_law(&InitialLaw::standard(), 12.0, 32).unwrap();
    let ctx = EnergyContext::new(&sp, &mu).unwrap();
    let state = init_particles(&InitialLaw::standard(), 64, 5).unwrap();
    c.bench_function("modulated_energy_terms_n32_p64", |b| {
        b.iter(|| black_box(ctx.modulated_energy_terms(state.positions.view()).unwrap()))
    });
}

fn bench_pde_step(c: &mut Criterion) {
    let sp = spec();
    let flow = FlowMatrix::neg_identity(3);
    let mu = GridDensity::from_law(&InitialLaw::standard(), 12.0, 32).unwrap();
    let config = PdeConfig::new(0.5, 0.01, 1.0);
    c.bench_function("pde_strang_step_n32", |b| {
        b.iter_batched(
            || mu.clone(),
            |mut m| {
                step_pde(&mut m, &config, &sp, &flow).unwrap();
                black_box(m)
            },
            BatchSize::LargeInput,
        )
    });
}

fn bench_sphere_average(c: &mut Criterion) {
    let sp = spec();
    c.bench_function("sphere_smeared_value_closed_form", |b| {
        b.iter(|| black_box(sp.smeared_value(SmearingRadius(0.1), black_box(0.37)).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_pair_drift,
    bench_freespace_convolution,
    bench_modulated_energy,
    bench_pde_step,
    bench_sphere_average
);
criterion_main!(benches);
