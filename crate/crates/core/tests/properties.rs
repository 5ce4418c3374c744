use lpgflow_core::eval::{psnr, ssim};
use lpgflow_core::flow::{euler_sample, interpolate, make_schedule, recompose, rf_loss, FnField};
use lpgflow_core::lpg::{crop_right, matching_mask, stitch, Canvas, Mask, MaskMode, MatchingOutcome, MatchingParams};
use lpgflow_core::model::{lora_apply, patchify, rope_apply, unpatchify, LoraPair, TokenPos};
use lpgflow_core::numerics::Tensor;
use lpgflow_core::rng;
use lpgflow_core::taskdata::{degrade, gen_scene, overlap_filter, warp_view, Degradation, Homography};
use proptest::prelude::*;
use rand::Rng;

fn unit_values(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..=1.0, n)
}

fn canvas(h: usize, w: usize) -> impl Strategy<Value = Canvas> {
    unit_values(h * w * 3).prop_map(move |d| Canvas::new(h, w, 3, d).unwrap())
}

fn mask(h: usize, w: usize) -> impl Strategy<Value = Mask> {
    prop::collection::vec(prop::bool::ANY, h * w)
        .prop_map(move |b| Mask::new(h, w, b.into_iter().map(|x| if x { 1.0 } else { 0.0 }).collect()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn interpolation_endpoints_are_exact(z0 in prop::collection::vec(-3.0f32..3.0, 1..20), seed: u64) {
        let mut r = rng::stream(seed, "eps", 0);
        let eps: Vec<f32> = (0..z0.len()).map(|_| r.random_range(-3.0..3.0)).collect();
        prop_assert_eq!(interpolate(&z0, &eps, 0.0).unwrap().z_t, z0.clone());
        prop_assert_eq!(interpolate(&z0, &eps, 1.0).unwrap().z_t, eps);
    }

    #[test]
    fn loss_is_non_negative_and_zero_only_at_target(
        ticks in prop::collection::vec(-32i32..32, 1..16),
        bump in 0usize..16,
    ) {
        let z0: Vec<f32> = ticks.iter().map(|&t| t as f32 / 16.0).collect();
        let eps: Vec<f32> = z0.iter().map(|v| 0.5 - v).collect();
        let target: Vec<f32> = eps.iter().zip(&z0).map(|(e, z)| e - z).collect();
        prop_assert_eq!(rf_loss(&target, &z0, &eps).unwrap(), 0.0);
        let mut off = target.clone();
        let i = bump % off.len();
        off[i] += 0.25;
        prop_assert!(rf_loss(&off, &z0, &eps).unwrap() > 0.0);
    }

    #[test]
    fn oracle_flow_is_exact_for_any_schedule(
        z0 in prop::collection::vec(-1.0f32..1.0, 1..12),
        steps in 1usize..60,
        seed: u64,
    ) {
        let mut r = rng::stream(seed, "eps", 0);
        let eps: Vec<f32> = (0..z0.len()).map(|_| r.random_range(-3.0..3.0)).collect();
        let v: Vec<f32> = eps.iter().zip(&z0).map(|(e, z)| e - z).collect();
        let field = FnField(|_: &[f32], _| v.clone());
        let out = euler_sample(&field, &eps, &make_schedule(steps).unwrap(), None).unwrap();
        for (a, b) in out.z.iter().zip(&z0) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn stitch_laws(left in canvas(4, 6), right in canvas(4, 6), m in mask(4, 6)) {
        let s = stitch(&left, &right, &MaskMode::Partial(m.clone())).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                prop_assert!(!s.mask.get(y, x));
            }
        }
        for (i, (&v, &z)) in s.canvas.data().iter().zip(s.masked.data()).enumerate() {
            let px = i / 3;
            let mv = s.mask.data()[px];
            prop_assert_eq!(z, v * (1.0 - mv));
        }
        let back = crop_right(&s.canvas).unwrap();
        prop_assert_eq!(&back, &right);
        let blanked = crop_right(&s.masked).unwrap();
        for y in 0..4 {
            for x in 0..6 {
                if !m.get(y, x) {
                    prop_assert_eq!(blanked.pixel(y, x), right.pixel(y, x));
                }
            }
        }
    }

    #[test]
    fn recompose_keeps_unmasked_pixels(z in unit_values(4 * 3), o in unit_values(4 * 3), m in mask(1, 4)) {
        let out = recompose(&z, &o, m.data()).unwrap();
        for px in 0..4 {
            let src = if m.data()[px] != 0.0 { &z } else { &o };
            prop_assert_eq!(&out[px * 3..px * 3 + 3], &src[px * 3..px * 3 + 3]);
        }
    }

    #[test]
    fn patchify_round_trips(
        rows in 1usize..4,
        cols in 1usize..4,
        p in 1usize..4,
        seed: u64,
    ) {
        let (h, w) = (rows * p, cols * p);
        let mut r = rng::stream(seed, "img", 0);
        let img: Vec<f32> = (0..h * w * 3).map(|_| r.random()).collect();
        let patches = patchify(&img, h, w, 3, p).unwrap();
        prop_assert_eq!(patches.data.len(), img.len());
        prop_assert_eq!(unpatchify(&patches), img);
    }

    #[test]
    fn psnr_falls_as_noise_grows(seed: u64) {
        let base = Canvas::filled(16, 16, 3, 0.5).unwrap();
        let mut r = rng::stream(seed, "noise", 0);
        let pattern: Vec<f32> = (0..16 * 16 * 3).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for sigma in [0.01f32, 0.05, 0.1, 0.2, 0.4] {
            let noisy = Canvas::new(16, 16, 3, pattern.iter().map(|p| 0.5 + sigma * p).collect()).unwrap();
            let db = psnr(&base, &noisy).unwrap();
            prop_assert!(db < last, "{db} !< {last}");
            last = db;
        }
    }

    #[test]
    fn ssim_is_bounded_symmetric_and_reflexive(a in canvas(8, 10), b in canvas(8, 10)) {
        let s = ssim(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((s - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn degradations_stay_in_range(c in canvas(8, 8), sigma in 0.0f32..2.0, seed: u64) {
        let mut r = rng::stream(seed, "deg", 0);
        for d in [Degradation::Noise { sigma }, Degradation::SuperRes { factor: 4 }, Degradation::Grayscale] {
            let out = degrade(&c, d, &mut r).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn overlap_filter_is_the_closed_interval(f in -0.5f64..1.5) {
        prop_assert_eq!(overlap_filter(f), (0.40..=0.70).contains(&f) || (f - 0.4).abs() < 1e-9 || (f - 0.7).abs() < 1e-9);
    }

    #[test]
    fn zero_b_adapter_is_identity(x in prop::collection::vec(-2.0f32..2.0, 3 * 5), seed: u64) {
        let mut r = rng::stream(seed, "w", 0);
        let w0 = Tensor::randn([4, 5], 1.0, &mut r);
        let pair = LoraPair { a: Tensor::randn([2, 5], 1.0, &mut r), b: Tensor::zeros([4, 2]) };
        let plain = lora_apply(&x, &w0, &LoraPair { a: Tensor::zeros([2, 5]), b: Tensor::zeros([4, 2]) }, 0.0).unwrap();
        prop_assert_eq!(lora_apply(&x, &w0, &pair, 1.0).unwrap(), plain);
    }

    #[test]
    fn rope_logits_invariant_under_common_shift(
        q in prop::collection::vec(-1.0f32..1.0, 8),
        k in prop::collection::vec(-1.0f32..1.0, 8),
        (r1, c1, r2, c2) in (0usize..6, 0usize..6, 0usize..6, 0usize..6),
        (dr, dc) in (0usize..5, 0usize..5),
    ) {
        let logit = |a: TokenPos, b: TokenPos| {
            let (qr, _) = rope_apply(&q, &q, &[a], 8, 10_000.0).unwrap();
            let (_, kr) = rope_apply(&k, &k, &[b], 8, 10_000.0).unwrap();
            qr.iter().zip(&kr).map(|(x, y)| x * y).sum::<f32>()
        };
        let a = logit(TokenPos { row: r1, col: c1 }, TokenPos { row: r2, col: c2 });
        let b = logit(TokenPos { row: r1 + dr, col: c1 + dc }, TokenPos { row: r2 + dr, col: c2 + dc });
        prop_assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
    }

    #[test]
    fn matching_masks_stay_inside_their_crop(seed in 0u64..400) {
        let scene = gen_scene(seed);
        let mut r = rng::stream(seed, "view", 0);
        let (_, matches, _) = warp_view(&scene.rgb, &Homography::random_view(32, 32, &mut r), 2, &mut r).unwrap();
        if let MatchingOutcome::Mask { mask, crop, vertices } =
            matching_mask(&matches, &MatchingParams::default(), 32, 32, &mut r).unwrap()
        {
            prop_assert!((15..=30).contains(&vertices.len()));
            for y in 0..32 {
                for x in 0..32 {
                    if mask.get(y, x) {
                        prop_assert!(crop.contains((x as f32 + 0.5, y as f32 + 0.5)));
                    }
                }
            }
        }
    }

    #[test]
    fn keyed_streams_are_reproducible(seed: u64, index: u64) {
        let a: Vec<u32> = (0..8).map({ let mut r = rng::stream(seed, "p", index); move |_| r.random() }).collect();
        let b: Vec<u32> = (0..8).map({ let mut r = rng::stream(seed, "p", index); move |_| r.random() }).collect();
        prop_assert_eq!(a, b);
    }
}
