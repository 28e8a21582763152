use mta_core::attribution::{clip_normalize, mask_powerset, sampled_masks, solve_weights, MaskMatrix, Weighting};
use mta_core::attribution::ols::shapley_kernel_weight;
use mta_core::journey::{
    encode_journey, load_journeys, save_journeys, split_stream, ClickEvent, CustomerJourney, Vocabulary,
};
use mta_core::model::{InitConfig, ModelParams};
use mta_core::report::{aggregate_channels, last_click_report};
use mta_core::attribution::{AttributionResult, Method};
use mta_core::trainer::{auc, journey_gradient};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn weights_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, 1..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn clip_normalize_is_a_distribution(raw in weights_strategy()) {
        let (w, flagged) = clip_normalize(&raw);
        prop_assert_eq!(w.len(), raw.len());
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        if flagged {
            prop_assert!(raw.iter().all(|&x| x <= 0.0));
            prop_assert!(w.iter().all(|&x| x == 0.0));
        } else {
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn clip_normalize_ignores_positive_scale(raw in weights_strategy(), scale in 1e-3f64..1e3) {
        let scaled: Vec<f64> = raw.iter().map(|x| x * scale).collect();
        let (a, fa) = clip_normalize(&raw);
        let (b, fb) = clip_normalize(&scaled);
        prop_assert_eq!(fa, fb);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn ols_residual_is_orthogonal_to_design(
        n in 1usize..=8,
        seed in any::<u64>(),
        sampled in any::<bool>(),
        kernel in any::<bool>(),
    ) {
        let masks = if sampled && n > 3 {
            sampled_masks(n, 2 * n + 4, seed).unwrap()
        } else {
            mask_powerset(n, 12).unwrap()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let acc: Vec<f64> = masks.rows.iter().map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect();
        let weighting = if kernel { Weighting::ShapleyKernel } else { Weighting::Uniform };
        let sol = solve_weights(&masks, &acc, weighting, true).unwrap();
        let residual: Vec<f64> = masks.rows.iter().zip(&acc).map(|(row, y)| {
            let fit = sol.intercept + row.iter().zip(&sol.coefficients).map(|(&m, c)| f64::from(m) * c).sum::<f64>();
            y - fit
        }).collect();
        let weight = |row: &Vec<u8>| match weighting {
            Weighting::Uniform => 1.0,
            Weighting::ShapleyKernel => shapley_kernel_weight(n, row.iter().filter(|&&m| m == 1).count()),
        };
        let scale: f64 = masks.rows.iter().map(&weight).sum();
        let intercept_dot: f64 = masks.rows.iter().zip(&residual).map(|(r, e)| weight(r) * e).sum();
        prop_assert!(intercept_dot.abs() / scale < 1e-8, "intercept column: {}", intercept_dot);
        for j in 0..n {
            let dot: f64 = masks.rows.iter().zip(&residual).map(|(r, e)| weight(r) * f64::from(r[j]) * e).sum();
            prop_assert!(dot.abs() / scale < 1e-8, "column {}: {}", j, dot);
        }
    }

    #[test]
    fn split_stream_partitions_events(
        gaps in prop::collection::vec(0u64..50, 0..30),
        cuts in prop::collection::vec((0u64..1500, 0.0f64..100.0), 0..6),
    ) {
        let mut t = 0;
        let events: Vec<ClickEvent> = gaps.iter().enumerate().map(|(i, g)| {
            t += g;
            ClickEvent::new(if i % 2 == 0 { "A" } else { "B" }, "c", t)
        }).collect();
        let mut conversions = cuts.clone();
        conversions.sort_by_key(|c| c.0);
        let journeys = split_stream("u", &events, &conversions).unwrap();
        let rejoined: Vec<ClickEvent> = journeys.iter().flat_map(|j| j.events.clone()).collect();
        prop_assert_eq!(rejoined, events);
        prop_assert!(journeys.iter().all(|j| !j.events.is_empty()));
        prop_assert!(journeys.iter().rev().skip(1).all(|j| j.converted));
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(
        data in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60),
    ) {
        let (scores, labels): (Vec<f64>, Vec<bool>) = data.into_iter().unzip();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let base = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((auc(&mapped, &labels).unwrap() - base).abs() < 1e-12);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn encoded_rows_sum_to_two_plus_elapsed(gaps in prop::collection::vec(0u64..20_000, 1..10)) {
        let vocab = Vocabulary::new(vec!["A".into(), "B".into()], vec!["c1".into(), "c2".into()]).unwrap();
        let mut t = 1_000_000;
        let events: Vec<ClickEvent> = gaps.iter().enumerate().map(|(i, g)| {
            t += g;
            ClickEvent::new(if i % 3 == 0 { "A" } else { "B" }, if i % 2 == 0 { "c1" } else { "c2" }, t)
        }).collect();
        let journey = CustomerJourney::new("u", events, true, 1.0).unwrap();
        let enc = encode_journey(&journey, &vocab, 32).unwrap();
        prop_assert_eq!(enc.times[0], 0.0);
        for (row, dt) in enc.features.rows().into_iter().zip(&enc.times) {
            prop_assert!((row.sum() - (2.0 + dt)).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_conserves_gmv_and_ignores_order(seed in any::<u64>(), n in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let channels = ["A", "B", "C", "D"];
        let mut results: Vec<(CustomerJourney, AttributionResult)> = (0..n).map(|i| {
            let len = rng.random_range(1..6);
            let events = (0..len).map(|k| ClickEvent::new(channels[rng.random_range(0..4)], "c", k as u64)).collect();
            let gmv = (rng.random_range(1.0..500.0f64) * 100.0).round() / 100.0;
            let journey = CustomerJourney::new(format!("u{i}"), events, true, gmv).unwrap();
            let raw: Vec<f64> = (0..len).map(|_| rng.random_range(-0.5..1.0)).collect();
            let (weights, unattributed) = clip_normalize(&raw);
            (journey, AttributionResult { raw_weights: raw, intercept: 0.0, weights, method: Method::Ols, unattributed })
        }).collect();
        let model = aggregate_channels(&results).unwrap();
        let base = last_click_report(&results).unwrap();
        let attributed: f64 = results.iter().filter(|(_, r)| !r.unattributed).map(|(j, _)| j.gmv).sum();
        for report in [&model, &base] {
            prop_assert!((report.allocated_gmv() - attributed).abs() <= 1e-6 * attributed.max(1.0));
            prop_assert_eq!(report.attributed_journeys, model.attributed_journeys);
        }
        results.reverse();
        let reversed = aggregate_channels(&results).unwrap();
        prop_assert_eq!(reversed.channels.len(), model.channels.len());
        for (name, stats) in &model.channels {
            let other = &reversed.channels[name];
            prop_assert_eq!(other.journey_count, stats.journey_count);
            prop_assert!((other.total_gmv - stats.total_gmv).abs() < 1e-9);
            prop_assert!((other.avg_accumulative_attribution - stats.avg_accumulative_attribution).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn small_sgd_step_lowers_example_loss(seed in any::<u64>(), len in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab = Vocabulary::new(vec!["A".into(), "B".into(), "C".into()], vec!["x".into()]).unwrap();
        let events = (0..len)
            .map(|i| ClickEvent::new(["A", "B", "C"][(seed as usize + i) % 3], "x", 3600 * (i as u64 * 5 + 1)))
            .collect();
        let journey = CustomerJourney::new("u", events, seed % 2 == 0, if seed % 2 == 0 { 1.0 } else { 0.0 }).unwrap();
        let enc = encode_journey(&journey, &vocab, 32).unwrap();
        let cfg = InitConfig { r_on: 0.5, time_span_hours: 30.0, ..InitConfig::new(vocab.dim(), 6) };
        let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
        let (before, grad) = journey_gradient(&params, &enc, false, 0).unwrap();
        prop_assume!(grad.global_norm() > 1e-6);
        params.add_scaled(-1e-6, &grad);
        let (after, _) = journey_gradient(&params, &enc, false, 0).unwrap();
        prop_assert!(after < before, "{} -> {}", before, after);
    }
}

#[test]
fn journeys_roundtrip_through_jsonl() {
    let cfg = mta_core::journey::GeneratorConfig {
        include_nonconverted: true,
        ..Default::default()
    };
    let (_, journeys) = mta_core::journey::generate_synthetic(&cfg, 3).unwrap();
    assert_eq!(journeys.len(), 1000);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("j.jsonl");
    save_journeys(&path, &journeys).unwrap();
    assert_eq!(load_journeys(&path).unwrap(), journeys);

    std::fs::write(&path, "").unwrap();
    assert!(load_journeys(&path).unwrap().is_empty());
    std::fs::write(
        &path,
        "{\"user_id\":\"u\",\"events\":[{\"channel\":\"A\",\"campaign\":\"c\",\"ts\":1}],\"converted\":false,\"gmv\":0.0}\n\
         {\"user_id\":\"u\",\"events\":[{\"channel\":\"A\",\"campaign\":\"c\",\"ts\":5},{\"channel\":\"A\",\"campaign\":\"c\",\"ts\":2}],\"converted\":false,\"gmv\":0.0}\n",
    )
    .unwrap();
    let err = load_journeys(&path).unwrap_err().to_string();
    assert!(err.contains("line 2"), "{err}");
}

#[test]
fn full_powerset_masks_are_unique() {
    let m: MaskMatrix = mask_powerset(10, 12).unwrap();
    let unique: std::collections::HashSet<_> = m.rows.iter().collect();
    assert_eq!(unique.len(), 1024);
}
