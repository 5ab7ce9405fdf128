use proptest::prelude::*;
use sigattack_core::baselines::{foreground_mask, run_baseline, BaselineConfig, Direction, Method, Victim};
use sigattack_core::data::{build_pairs, Dataset, SigImage};
use sigattack_core::defense::MixRatio;
use sigattack_core::eval::{best_threshold, tpr_tnr, DistanceRecord, Label};
use sigattack_core::model::{Architecture, ModelWeights};
use sigattack_core::tensor::{Graph, Tensor};
use sigattack_core::Result;
use std::collections::BTreeSet;

/// `D(x) = |w · x - b|` with an analytic gradient.
struct Linear {
    w: Vec<f64>,
    b: f64,
}

impl Victim for Linear {
    fn evaluate(&self, x: &[f64], dw: f64, _sw: f64) -> Result<(f64, Vec<f64>)> {
        let z: f64 = self.w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() - self.b;
        let s = if z >= 0.0 { 1.0 } else { -1.0 };
        Ok((z.abs(), self.w.iter().map(|w| dw * s * w).collect()))
    }
}

fn method() -> impl Strategy<Value = Method> {
    prop_oneof![
        Just(Method::Fgsm),
        Just(Method::Igs),
        Just(Method::Mim),
        Just(Method::Pgd),
        Just(Method::VmiFgsm),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_length_matches_shape(shape in prop::collection::vec(1usize..5, 1..4), extra in 0usize..3) {
        let n: usize = shape.iter().product();
        prop_assert!(Tensor::new(&shape, vec![0.0; n]).is_ok());
        if extra > 0 {
            prop_assert!(Tensor::new(&shape, vec![0.0; n + extra]).is_err());
        }
    }

    #[test]
    fn gram_is_symmetric(c in 1usize..5, h in 1usize..5, w in 1usize..5, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let f = g.constant(Tensor::new(&[c, h, w], data).unwrap());
        let gram = g.gram(f).unwrap();
        let v = g.value(gram).data();
        for i in 0..c {
            prop_assert!(v[i * c + i] >= 0.0);
            for j in 0..c {
                prop_assert_eq!(v[i * c + j], v[j * c + i]);
            }
        }
    }

    #[test]
    fn sign_methods_stay_in_the_box_and_ball(
        m in method(),
        eps in 0.01f64..0.5,
        fp in any::<bool>(),
        masked in any::<bool>(),
        start in prop::collection::vec(0.0f64..1.0, 12),
        w in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        let victim = Linear { w, b: 0.3 };
        let mut cfg = BaselineConfig::new(m, eps);
        cfg.iterations = 7;
        cfg.direction = if fp { Direction::Fp } else { Direction::Tn };
        cfg.foreground_mask = masked;
        let out = run_baseline(&victim, &start, &cfg).unwrap();
        let mask = foreground_mask(&start, masked);
        for ((x, s), m) in out.pixels.iter().zip(&start).zip(&mask) {
            prop_assert!((0.0..=1.0).contains(x));
            prop_assert!((x - s).abs() <= eps + 1e-12);
            if *m == 0.0 {
                prop_assert_eq!(x, s);
            }
        }
    }

    #[test]
    fn mix_counts_sum_to_batch(normal in 1u32..10, adv in 0u32..10, batch in 1usize..64) {
        let r = MixRatio { normal, adversarial: adv };
        let (n, a) = r.counts(batch);
        prop_assert_eq!(n + a, batch);
        prop_assert!(n >= 1);
        let exact = batch as f64 * adv as f64 / (normal + adv) as f64;
        prop_assert!((a as f64 - exact).abs() <= 0.5 + 1e-9 || a == batch - 1);
    }

    #[test]
    fn threshold_rates_are_consistent(
        sim in prop::collection::vec(0.0f64..2.0, 1..30),
        dis in prop::collection::vec(0.0f64..2.0, 1..30),
    ) {
        let mut recs: Vec<DistanceRecord> = sim.iter().enumerate()
            .map(|(i, &d)| DistanceRecord::new(format!("s{i}"), Label::Similar, d)).collect();
        recs.extend(dis.iter().enumerate().map(|(i, &d)| DistanceRecord::new(format!("d{i}"), Label::Dissimilar, d)));
        let best = best_threshold(&recs).unwrap();
        let (tpr, tnr) = tpr_tnr(&recs, best.tau).unwrap();
        prop_assert_eq!((tpr, tnr), (best.tpr, best.tnr));
        prop_assert!(best.accuracy >= 0.5);
        for r in &recs {
            let (t, n) = tpr_tnr(&recs, r.distance).unwrap();
            prop_assert!((t + n) / 2.0 <= best.accuracy);
        }
    }

    #[test]
    fn model_bytes_round_trip(seed in any::<u64>(), frozen in any::<bool>()) {
        let arch = Architecture { height: 8, width: 8, channels: vec![1, 2, 3], embed_dim: 3 };
        let mut m = ModelWeights::init(arch, seed).unwrap();
        if frozen {
            m.freeze();
        }
        let back = ModelWeights::from_bytes(&m.to_bytes()).unwrap();
        prop_assert_eq!(back.checksum(), m.checksum());
        prop_assert_eq!(back, m);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn splits_are_balanced_and_writer_disjoint(seed in any::<u64>(), m in 1usize..4) {
        let d = Dataset::synthetic(5, 4, 3, seed).unwrap();
        let (train, test) = build_pairs(&d, m, Some(3), seed).unwrap();
        for set in [&train, &test] {
            prop_assert_eq!(set.count(Label::Similar), set.count(Label::Dissimilar));
            for p in &set.pairs {
                let (a, b) = (&d.images[p.a], &d.images[p.b]);
                prop_assert_eq!(a.writer, b.writer);
                prop_assert!(set.writers.contains(&a.writer));
            }
        }
        let tw: BTreeSet<u32> = train.writers.iter().copied().collect();
        prop_assert!(test.writers.iter().all(|w| !tw.contains(w)));
        prop_assert_eq!(train.writers.len() + test.writers.len(), 5);
    }

    #[test]
    fn rendered_pixels_are_valid(seed in any::<u64>()) {
        let d = Dataset::synthetic(2, 2, 2, seed).unwrap();
        for img in &d.images {
            prop_assert!(img.pixels.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p)));
            prop_assert!(SigImage::new(img.height, img.width, img.pixels.clone()).is_ok());
        }
    }
}
