//! Benchmarks for the three hot paths: tempered softmax, the VAM layer
//! (fused forward vs the per-group definition), and the explainer forward.

use criterion::{black_box, criterion_group, criterion_main, Criterion};
use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use kdx_core::backbone::{BackboneSpec, Family};
use kdx_core::explainer::{build_explainer, ExplainerConfig};
use kdx_core::losses::tempered_softmax;
use kdx_core::nn::init;
use kdx_core::types::LogitVector;
use kdx_core::vam::{dense_equivalent_output, vam_forward, VamLayer, VamLayerSpec};

fn bench_tempered_softmax(c: &mut Criterion) {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let z = LogitVector::new((0..100).map(|_| rng.gen_range(-4.0..4.0)).collect()).unwrap();
    c.bench_function("tempered_softmax_k100", |b| {
        b.iter(|| tempered_softmax(black_box(&z), black_box(4.0)).unwrap())
    });
}

fn bench_vam(c: &mut Criterion) {
    let spec = VamLayerSpec {
        c_in: 32,
        c_out: 64,
        s: 3,
        m: 4,
        n: 8,
        stride: 1,
        pad: 1,
    };
    let mut wrng = init::substream(7, 1);
    let mut arng = init::substream(7, 2);
    let mut layer = VamLayer::init("bench", spec, &mut wrng, &mut arng).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let x3 = Array3::from_shape_fn((32, 16, 16), |_| rng.gen_range(-1.0..1.0));
    let x4 = Array4::from_shape_fn((4, 32, 16, 16), |_| rng.gen_range(-1.0..1.0));

    c.bench_function("vam_definition_32x64_16px", |b| {
        b.iter(|| vam_forward(black_box(&x3), black_box(&layer)).unwrap())
    });
    c.bench_function("vam_dense_equivalent_32x64_16px", |b| {
        b.iter(|| dense_equivalent_output(black_box(&x3), black_box(&layer)).unwrap())
    });
    c.bench_function("vam_layer_forward_b4_32x64_16px", |b| {
        b.iter(|| layer.forward(black_box(&x4), false).unwrap())
    });
}

fn bench_explainer_forward(c: &mut Criterion) {
    let spec = BackboneSpec::family_default(Family::TinyCnn, 10, (16, 16));
    let cfg = ExplainerConfig::new(vec![1, 2, 2], 1.0, 5);
    let mut model = build_explainer(&spec, &cfg).unwrap();
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let x = Array4::from_shape_fn((8, 3, 16, 16), |_| rng.gen_range(-1.0..1.0));
    c.bench_function("explainer_forward_tiny_b8_16px", |b| {
        b.iter(|| model.forward(black_box(&x), false).unwrap())
    });
}

criterion_group!(
    benches,
    bench_tempered_softmax,
    bench_vam,
    bench_explainer_forward
);
criterion_main!(benches);
