use proptest::prelude::*;
use sandwich_core::ccvq::{check_kraft, design_ccvq, DesignConfig, Init, Samples};
use sandwich_core::codec;
use sandwich_core::dct;
use sandwich_core::image::PlanarImage;
use sandwich_core::proxy::proxy_run;
use sandwich_core::sandwich::metrics::psnr_from_sse;
use sandwich_core::sandwich::psnr_dbit;

fn image(max_side: usize) -> impl Strategy<Value = PlanarImage> {
    (1..=max_side, 1..=max_side, prop_oneof![Just(1usize), Just(3usize)]).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(0u8..=255, h * w * c)
            .prop_map(move |v| PlanarImage::new(h, w, c, v.into_iter().map(f64::from).collect()).expect("sized"))
    })
}

fn stepsize() -> impl Strategy<Value = f32> {
    prop_oneof![Just(1.0f32), Just(3.0), Just(8.0), Just(21.5), Just(64.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dct_is_orthonormal(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let n = dct::padded(h) * dct::padded(w);
        let data: Vec<f64> = (0..n).map(|i| ((i as u64).wrapping_mul(seed | 1) % 511) as f64 - 255.0).collect();
        let (ph, pw) = (dct::padded(h), dct::padded(w));
        let coeffs = dct::forward(&data, 1, ph, pw, 1);
        let back = dct::inverse(&coeffs, 1, ph, pw, 1);
        let e0: f64 = data.iter().map(|v| v * v).sum();
        let e1: f64 = coeffs.iter().map(|v| v * v).sum();
        prop_assert!((e0 - e1).abs() <= 1e-9 * e0.max(1.0));
        for (a, b) in data.iter().zip(&back) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn decoder_reproduces_the_quantizer(img in image(24), delta in stepsize()) {
        let stream = codec::encode(&img, delta).unwrap();
        let decoded = codec::decode(&stream.bytes).unwrap();
        prop_assert_eq!(decoded.image, codec::quantize_dequantize(&img, delta).unwrap());
        prop_assert_eq!(decoded.delta, delta);
    }

    #[test]
    fn calibrated_proxy_rate_is_the_codec_rate(img in image(24), delta in stepsize()) {
        let trace = proxy_run(&img, delta).unwrap();
        let bits = codec::payload_bits(&img, delta).unwrap();
        prop_assert_eq!(trace.actual_bits, Some(bits));
        prop_assert_eq!(trace.proxy_rate_bits, bits as f64);
        prop_assert_eq!(trace.reconstruction, codec::quantize_dequantize(&img, delta).unwrap());
    }

    #[test]
    fn ccvq_lagrangian_never_increases(
        pts in prop::collection::vec(-4.0f64..4.0, 8..48),
        lengths in prop_oneof![Just(vec![1u32, 1]), Just(vec![1, 2, 2]), Just(vec![2, 2, 2, 2]), Just(vec![1, 2, 3, 3])],
        lambda in 0.0f64..2.0,
        seed in any::<u64>(),
    ) {
        check_kraft(&lengths).unwrap();
        let samples = Samples::new(1, pts, None).unwrap();
        let (codec, report) = design_ccvq(&samples, &lengths, &DesignConfig::new(lambda), &Init::Samples { seed }).unwrap();
        for w in report.iterations.windows(2) {
            prop_assert!(w[1].j <= w[0].j + 1e-12, "{} -> {}", w[0].j, w[1].j);
        }
        let mut used = codec.codelengths.clone();
        used.sort_by(f64::total_cmp);
        let mut given: Vec<f64> = lengths.iter().map(|&l| l as f64).collect();
        given.sort_by(f64::total_cmp);
        prop_assert_eq!(used, given);
        let (_, _, j) = codec.evaluate(&samples);
        prop_assert!((j - report.final_j()).abs() <= 1e-9 * j.max(1.0));
    }

    #[test]
    fn psnr_is_symmetric_and_matches_the_sse_form(a in image(12), seed in any::<u64>()) {
        let b = a.map(|v| ((v as u64 ^ seed) % 256) as f64);
        let p = psnr_dbit(&a, &b, 8).unwrap();
        prop_assert_eq!(p, psnr_dbit(&b, &a, 8).unwrap());
        prop_assert_eq!(p, psnr_from_sse(a.sse(&b).unwrap(), a.data.len(), 8));
        prop_assert!(p >= 0.0);
    }
}
