use routeprune::synthetic::{generate_synthetic, SyntheticSpec};
use routeprune::trace::{load_trace, save_trace, Trace, TraceError};

fn pair_mean_cosine(rows: &[Vec<f64>]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>() * b.iter().map(|x| x * x).sum::<f64>()).sqrt()
    };
    let mut acc = 0.0;
    let mut n = 0;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            acc += cos(&rows[i], &rows[j]);
            n += 1;
        }
    }
    acc / n as f64
}

fn probs(t: &Trace, layer: usize) -> Vec<Vec<f64>> {
    let d = t.routing(layer).unwrap();
    (0..d.num_tokens()).map(|i| d.row(i).to_vec()).collect()
}

fn planted(seed: u64, similarity: f64) -> SyntheticSpec {
    let mut s = SyntheticSpec::new(seed, 60, 4, 12, 3);
    s.block_len = 8;
    s.block_similarity = similarity;
    s.blocks = vec![10, 40];
    s
}

#[test]
fn save_load_round_trip_is_exact() {
    let trace = generate_synthetic(&planted(1, 0.9)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    save_trace(&trace, &path).unwrap();
    let back = load_trace(&path).unwrap();
    assert_eq!(back, trace);
    save_trace(&back, dir.path().join("u.json")).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(dir.path().join("u.json")).unwrap()
    );
}

#[test]
fn same_seed_same_trace() {
    let a = generate_synthetic(&planted(42, 0.95)).unwrap();
    let b = generate_synthetic(&planted(42, 0.95)).unwrap();
    let c = generate_synthetic(&planted(43, 0.95)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn planted_blocks_reach_requested_similarity() {
    for target in [0.5, 0.8, 0.95, 0.99] {
        let t = generate_synthetic(&planted(7, target)).unwrap();
        for l in 0..t.metadata.num_layers {
            let rows = probs(&t, l);
            for &s in &[10usize, 40] {
                assert!(
                    pair_mean_cosine(&rows[s..s + 8]) >= target,
                    "target {target}, layer {l}"
                );
            }
        }
    }
}

#[test]
fn unit_block_similarity_gives_identical_rows() {
    let t = generate_synthetic(&planted(3, 1.0)).unwrap();
    let rows = probs(&t, 0);
    assert!(rows[10..18].iter().all(|r| r == &rows[10]));
    let refs: Vec<&[f64]> = rows[10..15].iter().map(Vec::as_slice).collect();
    assert_eq!(
        routeprune_core::pruning::window_similarity_exact(&refs).unwrap(),
        1.0
    );
    assert_eq!(
        routeprune_core::pruning::window_similarity_approx(&refs).unwrap(),
        1.0
    );
}

#[test]
fn load_errors_name_the_problem() {
    let dir = tempfile::tempdir().unwrap();
    let missing = load_trace(dir.path().join("nope.json"));
    assert!(matches!(missing, Err(TraceError::Io { .. })));

    let trace = generate_synthetic(&SyntheticSpec::new(1, 4, 2, 4, 2)).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&trace.to_json()).unwrap();
    v["layers"][1]["routing"]["probs"][3][0] = serde_json::json!(0.9);
    let err = Trace::from_json(&v.to_string()).unwrap_err().to_string();
    assert!(err.contains("layers[1].routing.probs[3]"), "{err}");

    let mut v: serde_json::Value = serde_json::from_str(&trace.to_json()).unwrap();
    v["metadata"]["num_tokens"] = serde_json::json!(7);
    assert!(Trace::from_json(&v.to_string())
        .unwrap_err()
        .to_string()
        .contains("modality"));
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

    #[test]
    fn any_small_spec_round_trips(seed in 0u64..1_000, nv in 1usize..20, nt in 1usize..4, e in 2usize..9, k in 1usize..3) {
        let mut spec = SyntheticSpec::new(seed, nv, nt, e, k.min(e));
        spec.num_layers = 2;
        let trace = generate_synthetic(&spec).unwrap();
        trace.validate().unwrap();
        let back = Trace::from_json(&trace.to_json()).unwrap();
        proptest::prop_assert_eq!(back, trace);
    }
}
