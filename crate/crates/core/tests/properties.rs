mod common;

use common::{expected_count, free_gold, random_instance};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rationale_core::autodiff::{Graph, Tensor};
use rationale_core::evaluation::{perturb, rationale_prf, PerturbMode, PerturbationSpec};
use rationale_core::experiments::{bonferroni, mcnemar_test, ols, McNemarMethod};
use rationale_core::model::{gumbel_mask, sample_gumbel, Granularity, GumbelNoise};

fn count(bits: &[u8]) -> usize {
    bits.iter().filter(|&&b| b == 1).count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn drop_keeps_a_subset(seed in any::<u64>(), len in 1usize..40, n in 0u32..=100) {
        let inst = random_instance(seed, len, 1, 50);
        let gold = free_gold(&inst);
        let out = perturb(&inst, &PerturbationSpec { mode: PerturbMode::Drop, n, seed }, Granularity::Token, 0).unwrap();
        prop_assert!(out.rationale.iter().zip(&gold).all(|(&p, &g)| p <= g));
        prop_assert_eq!(count(&out.rationale), count(&gold) - expected_count(n, count(&gold)));
    }

    #[test]
    fn add_keeps_a_superset(seed in any::<u64>(), len in 1usize..40, n in 0u32..=100) {
        let inst = random_instance(seed, len, 1, 50);
        let gold = free_gold(&inst);
        let out = perturb(&inst, &PerturbationSpec { mode: PerturbMode::Add, n, seed }, Granularity::Token, 3).unwrap();
        prop_assert!(out.rationale.iter().zip(&gold).all(|(&p, &g)| p >= g));
        let pool = inst.forced().iter().zip(&gold).filter(|(f, g)| !**f && **g == 0).count();
        let k = expected_count(n, count(&gold));
        prop_assert_eq!(count(&out.rationale), count(&gold) + k.min(pool));
        prop_assert_eq!(out.clamped, k > pool);
    }

    #[test]
    fn swap_preserves_size(seed in any::<u64>(), len in 1usize..40, n in 0u32..=100) {
        let inst = random_instance(seed, len, 0, 50);
        let gold = free_gold(&inst);
        let out = perturb(&inst, &PerturbationSpec { mode: PerturbMode::Swap, n, seed }, Granularity::Token, 1).unwrap();
        let kept = out.rationale.iter().zip(&gold).filter(|(&p, &g)| p == 1 && g == 1).count();
        prop_assert_eq!(count(&out.rationale), count(&gold));
        prop_assert_eq!(kept, count(&gold) - out.dropped);
    }

    #[test]
    fn sentence_units_move_whole_sentences(seed in any::<u64>(), len in 2usize..40, n in 0u32..=100, mode_ix in 0usize..3) {
        let inst = random_instance(seed, len, 1, 50);
        let mode = PerturbMode::ALL[mode_ix];
        let out = perturb(&inst, &PerturbationSpec { mode, n, seed }, Granularity::Sentence, 2).unwrap();
        let forced = inst.forced();
        for i in 0..inst.len() {
            for j in 0..inst.len() {
                if !forced[i] && !forced[j] && inst.sentence_ids[i] == inst.sentence_ids[j] {
                    prop_assert_eq!(out.rationale[i], out.rationale[j]);
                }
            }
        }
    }

    #[test]
    fn keep_mask_covers_forced_positions(seed in any::<u64>(), len in 1usize..30, n in 0u32..=100) {
        let inst = random_instance(seed, len, 2, 50);
        let out = perturb(&inst, &PerturbationSpec { mode: PerturbMode::Swap, n, seed }, Granularity::Token, 0).unwrap();
        for (i, &f) in inst.forced().iter().enumerate() {
            prop_assert_eq!(out.keep[i], u8::from(f || out.rationale[i] == 1));
        }
    }

    #[test]
    fn prf_rates_are_bounded(seed in any::<u64>(), len in 1usize..30) {
        let inst = random_instance(seed, len, 1, 50);
        let pred = random_instance(seed ^ 1, len, 1, 50).rationale;
        let prf = rationale_prf(std::iter::once((pred.as_slice(), inst.rationale.as_slice(), inst.forced().as_slice()))).unwrap();
        for v in [prf.precision, prf.recall, prf.f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(prf.f1 <= prf.precision.max(prf.recall) + 1e-12);
    }

    #[test]
    fn mcnemar_is_symmetric(a in prop::collection::vec(0usize..3, 1..60), seed in any::<u64>()) {
        let n = a.len();
        let b: Vec<usize> = (0..n).map(|i| (a[i] + (seed as usize >> (i % 60)) % 2) % 3).collect();
        let labels: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
        for method in [McNemarMethod::ContinuityCorrected, McNemarMethod::ExactBinomial] {
            let ab = mcnemar_test(&a, &b, &labels, 2, method).unwrap();
            let ba = mcnemar_test(&b, &a, &labels, 2, method).unwrap();
            prop_assert_eq!((ab.b, ab.c), (ba.c, ba.b));
            prop_assert_eq!(ab.statistic, ba.statistic);
            prop_assert_eq!(ab.p_value, ba.p_value);
        }
    }

    #[test]
    fn bonferroni_bounds(p in 0.0f64..=1.0, n in 1usize..50) {
        let q = bonferroni(p, n);
        prop_assert!(q >= p && q <= 1.0);
    }

    #[test]
    fn ols_residuals_orthogonal_to_design(seed in any::<u64>(), rows in 6usize..30) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = 3;
        let mut data = Vec::new();
        for _ in 0..rows {
            data.push(1.0);
            data.push(rng.gen_range(-1.0..1.0));
            data.push(rng.gen_range(-1.0..1.0));
        }
        let x = DMatrix::from_row_slice(rows, p, &data);
        let y: Vec<f64> = (0..rows).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let names = vec!["intercept".to_string(), "a".into(), "b".into()];
        let fit = ols(&x, &y, &names).unwrap();
        for j in 0..p {
            let dot: f64 = (0..rows).map(|i| x[(i, j)] * fit.residuals[i]).sum();
            prop_assert!(dot.abs() < 1e-8, "column {} dot {}", j, dot);
        }
    }

    #[test]
    fn gumbel_rows_are_distributions(seed in any::<u64>(), len in 1usize..12, tau in 0.1f64..3.0) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..2 * len).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(len, 2, logits).unwrap());
        let m = gumbel_mask(&mut g, z, tau, GumbelNoise::Sample(&mut rng)).unwrap();
        let soft = g.value(m.soft).data().to_vec();
        let lp = g.value(m.log_pos).data().to_vec();
        let ln = g.value(m.log_neg).data().to_vec();
        for i in 0..len {
            prop_assert!((0.0..=1.0).contains(&soft[i]));
            prop_assert!((lp[i].exp() + ln[i].exp() - 1.0).abs() < 1e-12);
            prop_assert!((lp[i].exp() - soft[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn gumbel_samples_have_the_right_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 200_000;
    let mean = (0..n).map(|_| sample_gumbel(&mut rng)).sum::<f64>() / n as f64;
    // Euler–Mascheroni constant.
    assert!((mean - 0.577_215_664_9).abs() < 0.01, "{mean}");
}
