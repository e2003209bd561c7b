use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sandwich_core::ccvq::{design_ccvq, DesignConfig, Init, Samples};
use sandwich_core::networks::{build_processor, Network, ProcessorSpec};
use sandwich_core::proxy::{image_proxy_forward, ProxyConfig};
use sandwich_core::sandwich::{normalize, slim_spec, Format, Sandwich, Scenario};
use sandwich_core::synthetic::color_image;
use sandwich_core::{codec, dct, Tape};

fn bench(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let img = color_image(64, 64, &mut rng);
    let centered: Vec<f64> = img.data.iter().map(|v| v - 128.0).collect();

    c.bench_function("dct8_forward_64x64x3", |b| b.iter(|| dct::forward(&centered, 1, 64, 64, 3)));
    c.bench_function("codec_encode_64x64x3", |b| b.iter(|| codec::encode(&img, 8.0).unwrap()));

    c.bench_function("proxy_forward_backward_64x64x3", |b| {
        b.iter(|| {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(img.to_tensor());
            let d = tape.scalar_constant(8.0);
            let out = image_proxy_forward(&mut tape, x, d, &ProxyConfig::default(), &mut rng).unwrap();
            tape.backward(out.rate).unwrap();
        })
    });

    let net: Network<f32> = build_processor(&ProcessorSpec::slim(3, 3), &mut rng).unwrap();
    let x = normalize(&img).to_tensor::<f32>();
    c.bench_function("slim_processor_64x64", |b| b.iter(|| net.apply(&x).unwrap()));

    let model = Sandwich::<f64>::build(&slim_spec(Scenario::RgbOver400, Format::Yuv400, 8.0), &mut rng).unwrap();
    let s = normalize(&img);
    c.bench_function("sandwich_code_rgb_over_400", |b| b.iter(|| model.code(&s).unwrap()));

    let pts: Vec<f64> = (0..64).map(|i| ((i * 37) % 64) as f64 / 8.0).collect();
    let samples = Samples::new(1, pts, None).unwrap();
    c.bench_function("ccvq_design_k4_n64", |b| {
        b.iter(|| design_ccvq(&samples, &[1, 2, 3, 3], &DesignConfig::new(0.1), &Init::Samples { seed: 1 }).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = bench
}
criterion_main!(benches);
