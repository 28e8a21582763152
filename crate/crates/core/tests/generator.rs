use mta_core::journey::{generate_synthetic, in_last_three, save_journeys, GeneratorConfig};

fn mixed(n: usize) -> GeneratorConfig {
    GeneratorConfig {
        n_journeys: n,
        include_nonconverted: true,
        ..Default::default()
    }
}

#[test]
fn fixed_seed_gives_identical_files() {
    let cfg = mixed(500);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save_journeys(&a, &generate_synthetic(&cfg, 42).unwrap().1).unwrap();
    save_journeys(&b, &generate_synthetic(&cfg, 42).unwrap().1).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (_, other) = generate_synthetic(&cfg, 43).unwrap();
    assert_ne!(generate_synthetic(&cfg, 42).unwrap().1, other);
}

#[test]
fn no_lift_converts_at_base_rate() {
    let n = 20_000;
    let cfg = GeneratorConfig {
        key_lift: 0.0,
        base_rate: 0.3,
        ..mixed(n)
    };
    let (_, journeys) = generate_synthetic(&cfg, 5).unwrap();
    let rate = journeys.iter().filter(|j| j.converted).count() as f64 / n as f64;
    let sigma = (0.3 * 0.7 / n as f64).sqrt();
    assert!((rate - 0.3).abs() < 3.0 * sigma, "rate {rate}, 3σ = {}", 3.0 * sigma);
}

#[test]
fn key_channel_in_last_three_lifts_conversion() {
    let cfg = mixed(10_000);
    let (_, journeys) = generate_synthetic(&cfg, 11).unwrap();
    let key = cfg.key_channel();
    let (mut n1, mut c1, mut n0, mut c0) = (0.0, 0.0, 0.0, 0.0);
    for j in &journeys {
        let converted = f64::from(u8::from(j.converted));
        if in_last_three(j, &key) {
            n1 += 1.0;
            c1 += converted;
        } else {
            n0 += 1.0;
            c0 += converted;
        }
    }
    let (p1, p0) = (c1 / n1, c0 / n0);
    let pooled = (c1 + c0) / (n1 + n0);
    let z = (p1 - p0) / (pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n0)).sqrt();
    // One-sided test at the 1% level.
    assert!(z > 2.326, "z = {z}, rates {p1} vs {p0}");
    assert!((p1 - 0.8).abs() < 0.03 && (p0 - 0.2).abs() < 0.03, "{p1} {p0}");
}

#[test]
fn shapes_and_amounts() {
    let cfg = mixed(8_000);
    let (vocab, journeys) = generate_synthetic(&cfg, 2).unwrap();
    assert_eq!(vocab.channels().len(), 4);
    assert_eq!(vocab.campaigns().len(), 3);
    let mut counts = vec![0usize; cfg.max_len + 1];
    for j in &journeys {
        counts[j.events.len()] += 1;
        assert!(j.validate().is_ok());
        assert_eq!(j.converted, j.gmv > 0.0);
    }
    assert_eq!(counts[0], 0);
    let expected = journeys.len() as f64 / cfg.max_len as f64;
    for &c in &counts[1..] {
        assert!((c as f64 - expected).abs() < 5.0 * expected.sqrt(), "{counts:?}");
    }
    let mut gmv: Vec<f64> = journeys.iter().filter(|j| j.converted).map(|j| j.gmv).collect();
    gmv.sort_by(f64::total_cmp);
    let median = gmv[gmv.len() / 2];
    assert!((median - 50.0).abs() < 4.0, "median {median}");
}

#[test]
fn converted_only_by_default() {
    let (_, journeys) = generate_synthetic(&GeneratorConfig::default(), 9).unwrap();
    assert_eq!(journeys.len(), 1000);
    assert!(journeys.iter().all(|j| j.converted && j.labels().last() == Some(&1)));
}

#[test]
fn invalid_probabilities_are_rejected() {
    for (base_rate, key_lift) in [(1.5, 0.0), (0.0, 0.1), (0.5, 0.6), (0.2, -0.1)] {
        let cfg = GeneratorConfig {
            base_rate,
            key_lift,
            ..Default::default()
        };
        assert!(generate_synthetic(&cfg, 0).is_err(), "{base_rate} {key_lift}");
    }
}
