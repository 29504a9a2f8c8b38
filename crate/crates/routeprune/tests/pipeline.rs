use routeprune::config::RunConfig;
use routeprune::pipeline::{run_on_trace, run_pipeline};
use routeprune::report::{layers_csv, stages_csv, to_json, RunReport};
use routeprune::synthetic::{generate_synthetic, SyntheticSpec};
use routeprune_core::round_half_up;

fn base_config(spec: SyntheticSpec) -> RunConfig {
    RunConfig {
        synthetic: Some(spec),
        ..RunConfig::default()
    }
}

fn planted_spec(seed: u64) -> SyntheticSpec {
    let mut s = SyntheticSpec::new(seed, 120, 8, 16, 4);
    s.num_layers = 6;
    s.block_len = 10;
    s.block_similarity = 0.99;
    s.blocks = vec![50];
    s
}

#[test]
fn staged_counts_follow_per_stage_rounding() {
    for nv in [7usize, 50, 123, 300] {
        let mut spec = SyntheticSpec::new(2, nv, 3, 8, 2);
        spec.num_layers = 9;
        spec.hidden = false;
        let mut c = base_config(spec);
        c.pruning.prune_layers = vec![1, 4, 7];
        c.pruning.retention = Some(0.25);
        c.pruning.gamma = 0.1;
        let r = run_pipeline(&c).unwrap();

        // independent bookkeeping of the per-stage targets
        let beta = 0.25f64.powf(1.0 / 3.0);
        let mut n = nv;
        for s in &r.stages {
            assert_eq!(s.vision_before, n);
            n = round_half_up(beta * n as f64);
            assert_eq!(s.target, n);
            assert_eq!(
                s.vision_kept + s.vision_dropped + s.vision_absorbed,
                s.vision_before
            );
        }
        assert_eq!(r.final_vision_tokens, n);
        for l in &r.layers {
            let done = r.stages.iter().filter(|s| s.layer < l.layer).count();
            let expect = if done == 0 {
                nv
            } else {
                r.stages[done - 1].target
            };
            assert_eq!(l.vision_tokens, expect);
        }
    }
}

#[test]
fn planted_block_is_merged_first_when_similarity_decides() {
    let mut c = base_config(planted_spec(17));
    c.pruning.prune_layers = vec![1];
    c.pruning.beta = Some(0.7);
    c.pruning.window = 5;
    c.pruning.alpha = 1.0;
    c.pruning.gamma = 0.03;
    let r = run_pipeline(&c).unwrap();
    let stage = &r.stages[0];
    // block 50..60 covers windows 10 and 11
    let mut first_two = stage.merge_windows[..2].to_vec();
    first_two.sort_unstable();
    assert_eq!(first_two, [10, 11]);
    assert_eq!(stage.merged_members[0].len(), 5);
    let best = stage
        .scores
        .similarity
        .iter()
        .cloned()
        .fold(f64::MIN, f64::max);
    assert_eq!(
        stage.scores.similarity[10].max(stage.scores.similarity[11]),
        best
    );
}

#[test]
fn reduction_counts_expert_evaluations() {
    let mut c = base_config(planted_spec(4));
    c.reduction.start_layer = Some(3);
    c.reduction.reduced = Some(2);
    let r = run_pipeline(&c).unwrap();
    for l in &r.layers {
        if l.layer < 3 {
            assert_eq!(l.routed_evaluations, l.tokens * 4);
            assert_eq!(l.reduced_tokens, 0);
        } else {
            assert_eq!(l.reduced_tokens, 120);
            assert_eq!(l.routed_evaluations, 120 * 2 + 8 * 4);
        }
    }
    assert!(r.flops.run.act.savings() > 0.0);
    assert_eq!(r.flops.run.prune.ratio(), 1.0);
}

#[test]
fn identical_configs_give_identical_bytes() {
    let mut c = base_config(planted_spec(99));
    c.pruning.prune_layers = vec![1, 3];
    c.pruning.retention = Some(0.5);
    c.reduction.start_layer = Some(2);
    c.reduction.ratio = Some(0.5);
    c.reduction.strategy = routeprune_core::reduction::Strategy::RandomK;
    let a = to_json(&run_pipeline(&c).unwrap());
    let b = to_json(&run_pipeline(&c).unwrap());
    assert_eq!(a, b);
}

#[test]
fn report_round_trips_and_csv_has_one_row_per_layer() {
    let mut c = base_config(planted_spec(5));
    c.pruning.prune_layers = vec![2];
    c.pruning.beta = Some(0.5);
    c.flops = Some(routeprune::config::FlopsSection {
        preset: Some(routeprune_core::flops::Schedule::Internvl48),
        ..Default::default()
    });
    let r = run_pipeline(&c).unwrap();
    let json = to_json(&r);
    let back: RunReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back, r);
    assert!(json.starts_with("{\n  \"schema_version\": 1,"));

    let csv = String::from_utf8(layers_csv(&r)).unwrap();
    assert_eq!(csv.lines().count(), 1 + r.layers.len());
    let stages = String::from_utf8(stages_csv(&r)).unwrap();
    assert_eq!(stages.lines().count(), 2);
    let preset = r.flops.preset.as_ref().unwrap();
    assert!((preset.prune.beta - 0.5).abs() < 1e-12);
}

#[test]
fn trivial_run_still_reports() {
    let mut spec = SyntheticSpec::new(1, 1, 1, 2, 1);
    spec.num_layers = 1;
    let r = run_pipeline(&base_config(spec)).unwrap();
    assert!(r.stages.is_empty());
    assert_eq!(r.layers.len(), 1);
    let back: RunReport = serde_json::from_str(&to_json(&r)).unwrap();
    assert_eq!(back, r);
}

#[test]
fn bad_configs_are_rejected_with_context() {
    let trace = generate_synthetic(&planted_spec(1)).unwrap();
    let mut c = base_config(planted_spec(1));
    c.pruning.prune_layers = vec![9];
    let err = run_on_trace(&trace, &c).unwrap_err().to_string();
    assert!(err.contains("prune layer 9"), "{err}");

    let mut c = base_config(planted_spec(1));
    c.reduction.start_layer = Some(2);
    c.reduction.reduced = Some(9);
    assert!(run_on_trace(&trace, &c).is_err());
}

#[test]
fn merged_hidden_rows_match_kept_count() {
    let mut c = base_config(planted_spec(8));
    c.pruning.prune_layers = vec![0, 2];
    c.pruning.beta = Some(0.6);
    c.pruning.gamma = 0.1;
    let r = run_pipeline(&c).unwrap();
    for s in &r.stages {
        assert_eq!(s.hidden_tokens_after, Some(s.target + 8));
    }
}
