use proptest::prelude::*;

use ddslab::diffusion::{add_noise, cfg_predict, Denoiser, DenoiserConfig, NoisePredictor, NoiseSchedule};
use ddslab::editor::EditSettings;
use ddslab::eval::mode_collapse_index;
use ddslab::image::{Batch, Image, ImageDims};
use ddslab::nn::UNetConfig;
use ddslab::rng;
use ddslab::scores::{cosine, dds_grad_batch, saliency_of, sds_grad_batch};
use ddslab::synthdata::{gen_image, mask_of, random_spec, support_of, Background, Caption, Shape, ShapeColor};
use ddslab::translator::{cfg_warmup, id_weight, I2ITrainConfig};
use ddslab::Result;

const DIMS: ImageDims = ImageDims { channels: 3, height: 8, width: 8 };

fn micro() -> Denoiser {
    let cfg = DenoiserConfig {
        canvas: DIMS,
        unet: UNetConfig { in_channels: 3, base_width: 8, channel_mults: vec![1, 2], emb_dim: 16, time_features: 8, groups: 4 },
    };
    Denoiser::new(cfg, NoiseSchedule::cosine(), 5).unwrap()
}

fn image(seed: u64, scale: f32) -> Image {
    Image::from_vec(DIMS, rng::normal_vec(&mut rng::rng(seed), DIMS.len()).into_iter().map(|v| scale * v).collect()).unwrap()
}

fn caption() -> impl Strategy<Value = Caption> {
    (
        proptest::option::of(0..Shape::COUNT),
        proptest::option::of(0..ShapeColor::COUNT),
        proptest::option::of(0..Background::COUNT),
    )
        .prop_map(|(s, c, b)| Caption {
            shape: s.and_then(Shape::from_index),
            shape_color: c.and_then(ShapeColor::from_index),
            background: b.and_then(Background::from_index),
        })
}

/// Wraps a model and replaces every null-caption prediction with garbage.
struct CorruptNull<'a>(&'a Denoiser);

impl NoisePredictor for CorruptNull<'_> {
    fn dims(&self) -> ImageDims {
        self.0.dims()
    }

    fn schedule(&self) -> &NoiseSchedule {
        self.0.schedule()
    }

    fn predict(&self, z_t: &Batch, conds: &[Caption], t: &[f32]) -> Result<Batch> {
        let mut out = self.0.predict(z_t, conds, t)?;
        for (i, c) in conds.iter().enumerate() {
            if *c == Caption::NULL {
                out.item_mut(i).iter_mut().enumerate().for_each(|(k, v)| *v = 1e3 * (k as f32).sin());
            }
        }
        Ok(out)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn forward_noising_inverts(seed in any::<u64>(), t in 0.0f64..0.99) {
        let sched = NoiseSchedule::cosine();
        let (z, eps) = (image(seed, 0.5), image(seed ^ 1, 1.0));
        let zt = add_noise(&z, &eps, t, &sched).unwrap().z_t;
        let (a, b) = sched.coefficients(t);
        for ((&zt, &e), &z) in zt.data().iter().zip(eps.data()).zip(z.data()) {
            prop_assert!(((f64::from(zt) - b * f64::from(e)) / a - f64::from(z)).abs() < 1e-5);
        }
    }

    #[test]
    fn schedule_coefficients_are_a_rotation(t in 0.0f64..=1.0) {
        let (a, b) = NoiseSchedule::cosine().coefficients(t);
        prop_assert!((a * a + b * b - 1.0).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
    }

    #[test]
    fn cfg_is_linear_in_omega(seed in any::<u64>(), y in caption(), w1 in 0.0f64..10.0, w2 in 0.0f64..10.0, t in 0.02f32..0.98) {
        let d = micro();
        let z = Batch::from_images([&image(seed, 1.0)]).unwrap();
        let p = |w: f64| cfg_predict(&d, &z, &[y], &[t], w).unwrap();
        let (a, b, c, s) = (p(w1), p(w2), p(0.0), p(w1 + w2));
        for i in 0..DIMS.len() {
            let lhs = f64::from(a.data()[i]) + f64::from(b.data()[i]) - f64::from(c.data()[i]);
            prop_assert!((lhs - f64::from(s.data()[i])).abs() < 1e-4 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn dds_is_difference_of_sds_and_self_annihilates(
        seed in any::<u64>(), y in caption(), yhat in caption(), t in 0.02f32..0.98, omega in 0.0f64..20.0,
    ) {
        let d = micro();
        let z = Batch::from_images([&image(seed, 1.0)]).unwrap();
        let zhat = Batch::from_images([&image(seed ^ 2, 1.0)]).unwrap();
        let eps = Batch::from_images([&image(seed ^ 3, 1.0)]).unwrap();
        let dds = dds_grad_batch(&d, &z, &[y], &zhat, &[yhat], &eps, &[t], omega).unwrap().0;
        let a = sds_grad_batch(&d, &z, &[y], &eps, &[t], omega).unwrap().0;
        let b = sds_grad_batch(&d, &zhat, &[yhat], &eps, &[t], omega).unwrap().0;
        for i in 0..DIMS.len() {
            prop_assert!((f64::from(dds.data()[i]) - (f64::from(a.data()[i]) - f64::from(b.data()[i]))).abs() < 1e-6);
        }
        let zero = dds_grad_batch(&d, &z, &[y], &z, &[y], &eps, &[t], omega).unwrap().0;
        prop_assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shared_image_ignores_unconditional_branch(seed in any::<u64>(), y in caption(), yhat in caption(), t in 0.02f32..0.98, omega in 0.0f64..20.0) {
        prop_assume!(y != Caption::NULL && yhat != Caption::NULL);
        let d = micro();
        let z = Batch::from_images([&image(seed, 1.0)]).unwrap();
        let eps = Batch::from_images([&image(seed ^ 3, 1.0)]).unwrap();
        let clean = dds_grad_batch(&d, &z, &[y], &z, &[yhat], &eps, &[t], omega).unwrap().0;
        let bad = dds_grad_batch(&CorruptNull(&d), &z, &[y], &z, &[yhat], &eps, &[t], omega).unwrap().0;
        for (a, b) in clean.data().iter().zip(bad.data()) {
            prop_assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn predictions_ignore_batch_position(seed in any::<u64>(), n in 2usize..7, k in 0usize..6, y in caption()) {
        let k = k % n;
        let d = micro();
        let images: Vec<Image> = (0..n).map(|i| image(seed.wrapping_add(i as u64), 1.0)).collect();
        let ts: Vec<f32> = (0..n).map(|i| 0.1 + 0.1 * i as f32).collect();
        let full = d.predict(&Batch::from_images(&images).unwrap(), &vec![y; n], &ts).unwrap();
        let one = d.predict(&Batch::from_images([&images[k]]).unwrap(), &[y], &[ts[k]]).unwrap();
        prop_assert_eq!(full.item(k), one.item(0));
    }

    #[test]
    fn rendering_is_deterministic_and_masks_are_consistent(seed in any::<u64>()) {
        let canvas = ImageDims::rgb(16, 16);
        let spec = random_spec(seed, canvas);
        let img = gen_image(&spec, canvas).unwrap();
        prop_assert_eq!(&img, &gen_image(&spec, canvas).unwrap());
        prop_assert!(img.in_range());
        let (mask, sup) = (mask_of(&spec, canvas).unwrap(), support_of(&spec, canvas).unwrap());
        prop_assert!(mask.area() > 0 && mask.area() < canvas.pixels());
        prop_assert!(mask.as_slice().iter().zip(sup.as_slice()).all(|(&m, &s)| !m || s));
        let text = spec.caption().to_string();
        prop_assert_eq!(text.parse::<Caption>().unwrap(), spec.caption());
    }

    #[test]
    fn translator_schedules_stay_between_endpoints(iter in 0usize..30_000) {
        let cfg = I2ITrainConfig::desk();
        let (w, l) = (cfg_warmup(iter, &cfg), id_weight(iter, &cfg));
        prop_assert!((1.0..=cfg.omega_max).contains(&w));
        prop_assert!((cfg.lambda_end..=cfg.lambda_start).contains(&l));
        prop_assert!(cfg_warmup(iter + 1, &cfg) >= w);
        prop_assert!(id_weight(iter + 1, &cfg) <= l);
    }

    #[test]
    fn edit_learning_rate_decays_stepwise(k in 0usize..400) {
        let s = EditSettings::default();
        let want = 2.0 * 0.9f64.powi((k / 20) as i32);
        prop_assert!((s.lr_at(k) - want).abs() < 1e-12);
    }

    #[test]
    fn saliency_and_cosine_are_bounded(seed in any::<u64>(), scale in 0.0f32..10.0) {
        let g = image(seed, scale);
        let map = saliency_of(&g);
        prop_assert!(map.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        if let Some(c) = cosine(g.data(), image(seed ^ 9, 1.0).data()) {
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&c));
        }
    }

    #[test]
    fn collapse_index_is_zero_for_identity_and_one_for_constant(seed in any::<u64>(), n in 2usize..6) {
        let inputs: Vec<Image> = (0..n).map(|i| image(seed.wrapping_add(i as u64), 1.0)).collect();
        prop_assert!(mode_collapse_index(&inputs, &inputs).unwrap().abs() < 1e-12);
        let constant = vec![inputs[0].clone(); n];
        prop_assert!((mode_collapse_index(&inputs, &constant).unwrap() - 1.0).abs() < 1e-12);
    }
}
