use destnet::autodiff::{Graph, Tensor};
use destnet::data::{CornerNoise, PerturbConfig};
use destnet::evaluation::{ced_and_auc, corner_error};
use destnet::geometry::{
    bilinear_sample, compose_additive, corners_to_homography, generate_grid, WarpParams,
};
use destnet::netbuilder::{parse_arch, ArchSpec, Layer};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_arch() -> impl Strategy<Value = ArchSpec> {
    let conv = (1usize..10, 1usize..300, 1usize..4).prop_map(|(receptive, channels, stride)| Layer::Conv {
        receptive,
        channels,
        stride,
    });
    let block = (conv, any::<bool>()).prop_map(|(c, pool)| if pool { vec![c, Layer::Pool] } else { vec![c] });
    (
        prop::collection::vec(block, 0..4),
        prop::collection::vec((1usize..500).prop_map(|out| Layer::Fc { out }), 0..3),
    )
        .prop_filter_map("non-empty", |(blocks, fcs)| {
            let layers: Vec<Layer> = blocks.into_iter().flatten().chain(fcs).collect();
            ArchSpec::new(layers).ok()
        })
}

fn arb_params(scale: f64) -> impl Strategy<Value = WarpParams> {
    prop::array::uniform8(-scale..scale).prop_map(|p| WarpParams::new(p).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arch_render_round_trips(arch in arb_arch()) {
        let text = arch.to_string();
        prop_assert_eq!(parse_arch(&text).unwrap(), arch.clone());
        let spaced = text.replace(' ', "   ");
        prop_assert_eq!(parse_arch(&spaced).unwrap(), arch);
    }

    #[test]
    fn ced_is_nondecreasing(errors in prop::collection::vec(0.0f64..0.1, 1..200), points in 2usize..150) {
        let (c, auc) = ced_and_auc(&errors, 0.04, points).unwrap();
        prop_assert!(c.fractions.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(*c.fractions.last().unwrap() <= 1.0);
        prop_assert!((0.0..=1.0).contains(&auc));
        prop_assert!(c.thresholds.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn auc_ignores_order(mut errors in prop::collection::vec(0.0f64..0.08, 1..100), seed in any::<u64>()) {
        let (_, a) = ced_and_auc(&errors, 0.04, 100).unwrap();
        use rand::seq::SliceRandom;
        errors.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (_, b) = ced_and_auc(&errors, 0.04, 100).unwrap();
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn corner_error_is_translation_invariant(
        pts in prop::array::uniform8(-50.0f64..50.0),
        gt in prop::array::uniform8(-50.0f64..50.0),
        t in prop::array::uniform2(-100.0f64..100.0),
        diag in 1.0f64..400.0,
    ) {
        let quad = |v: [f64; 8]| [[v[0], v[1]], [v[2], v[3]], [v[4], v[5]], [v[6], v[7]]];
        let (p, g) = (quad(pts), quad(gt));
        let shift = |q: [[f64; 2]; 4]| q.map(|c| [c[0] + t[0], c[1] + t[1]]);
        let a = corner_error(&p, &g, diag);
        let b = corner_error(&shift(p), &shift(g), diag);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn backward_is_linear_in_the_seed(scale in -5.0f64..5.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x: Vec<f64> = (0..2 * 36).map(|_| rng.random_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..2 * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grads = |s: f64| {
            let mut g = Graph::new();
            let xv = g.input(Tensor::new(vec![1, 2, 6, 6], x.clone()).unwrap().with_requires_grad(true));
            let kv = g.input(Tensor::new(vec![1, 2, 3, 3], k.clone()).unwrap().with_requires_grad(true));
            let y = g.conv2d(xv, kv, 1, 1).unwrap();
            let t = g.tanh(y);
            let l = g.sum(t);
            let l = g.scale(l, s);
            g.backward(l).unwrap();
            (g.grad(xv).unwrap().to_vec(), g.grad(kv).unwrap().to_vec())
        };
        let (gx1, gk1) = grads(1.0);
        let (gxs, gks) = grads(scale);
        for (a, b) in gx1.iter().chain(&gk1).zip(gxs.iter().chain(&gks)) {
            prop_assert!((a * scale - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn warping_commutes_with_batch_order(p0 in arb_params(0.2), p1 in arb_params(0.2), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let imgs: Vec<f64> = (0..2 * 49).map(|_| rng.random_range(0.0..1.0)).collect();
        let warp = |order: [usize; 2]| {
            let mut g = Graph::new();
            let ps: Vec<f64> = order.iter().flat_map(|&i| [p0, p1][i].0).collect();
            let im: Vec<f64> = order.iter().flat_map(|&i| imgs[i * 49..(i + 1) * 49].to_vec()).collect();
            let pv = g.constant(Tensor::new(vec![2, 8], ps).unwrap());
            let iv = g.constant(Tensor::new(vec![2, 1, 7, 7], im).unwrap());
            let grid = g.warp_grid(pv, 7, 7).unwrap();
            let out = g.bilinear_sample(iv, grid).unwrap();
            g.data(out).to_vec()
        };
        let a = warp([0, 1]);
        let b = warp([1, 0]);
        prop_assert_eq!(&a[..49], &b[49..]);
        prop_assert_eq!(&a[49..], &b[..49]);
    }

    #[test]
    fn adding_zero_update_keeps_grid(p in arb_params(0.3)) {
        let q = compose_additive(&p, &WarpParams::IDENTITY);
        prop_assert_eq!(q, p);
        let a = generate_grid(&p, 5, 7).unwrap();
        let b = generate_grid(&q, 5, 7).unwrap();
        prop_assert_eq!(a.coords.data(), b.coords.data());
        let img = Tensor::filled(&[1, 1, 5, 7], 0.5);
        prop_assert_eq!(bilinear_sample(&img, &a).unwrap(), bilinear_sample(&img, &b).unwrap());
    }

    #[test]
    fn dlt_reproduces_corners(offsets in prop::array::uniform8(-6.0f64..6.0)) {
        let src = [[0.0, 0.0], [27.0, 0.0], [27.0, 27.0], [0.0, 27.0]];
        let mut dst = src;
        for (i, c) in dst.iter_mut().enumerate() {
            c[0] += offsets[2 * i];
            c[1] += offsets[2 * i + 1];
        }
        let h = corners_to_homography(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let (x, y) = h.apply(s[0], s[1]).unwrap();
            prop_assert!((x - d[0]).abs() < 1e-9 && (y - d[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn clamped_noise_is_bounded(sigma in 0.01f64..0.5, raster in 8usize..300, seed in any::<u64>()) {
        let cfg = PerturbConfig::new(sigma, raster, true).unwrap();
        let bound = cfg.scale_px();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..50 {
            let n = CornerNoise::draw(&cfg, &mut rng);
            prop_assert!(n.offsets.iter().flatten().chain(&n.translation).all(|v| v.abs() <= bound));
        }
    }
}

#[test]
fn unclamped_noise_matches_sigma() {
    for (sigma, raster) in [(0.1, 28), (0.3, 64)] {
        let cfg = PerturbConfig::new(sigma, raster, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws: Vec<f64> = (0..20_000)
            .flat_map(|_| CornerNoise::draw(&cfg, &mut rng).offsets.into_iter().flatten())
            .collect();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let std = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.02 * cfg.scale_px(), "mean {mean}");
        assert!((std / cfg.scale_px() - 1.0).abs() < 0.02, "std {std}");
    }
}
