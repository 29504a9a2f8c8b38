//! Layer-by-layer replay of a trace under expert reduction and vision-token
//! pruning.
//!
//! The trace records every original token at every layer. After a pruning
//! stage each surviving token stands for a group of original tokens: a kept
//! token is a group of one, a merged token the union of its window. A group's
//! routing row is the mean of its members' rows and its attention the sum of
//! theirs.

use routeprune_core::flops::{ratio_act, ratio_combined, ratio_prune, FlopsConfig, Schedule};
use routeprune_core::moe::{Modality, ModalityMask, MoeConfig, RoutingDistribution};
use routeprune_core::pruning::{
    apply_plan, merge_tokens, plan_pruning, score_windows, window_partition, PlanWarning,
    PruneSchedule,
};
use routeprune_core::reduction::{apply_reduction, baseline_gating, ReducedCount, ReductionPolicy};
use routeprune_core::theory::{gamma_upper_bound, layer_stability};
use routeprune_core::{round_half_up, HiddenState, Matrix};
use thiserror::Error;

use crate::config::{ConfigError, FlopsSection as FlopsOverrides, RunConfig};
use crate::report::{
    FlopsSection, FlopsSummary, GammaCheck, LayerRecord, RunReport, SourceSummary, StageRecord,
    SCHEMA_VERSION,
};
use crate::synthetic::{generate_synthetic, SyntheticError};
use crate::trace::{load_trace, Trace, TraceError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Synthetic(#[from] SyntheticError),
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: routeprune_core::Error,
    },
    #[error("{0}")]
    Core(#[from] routeprune_core::Error),
    #[error("layer {layer}: {message}")]
    Invariant { layer: usize, message: String },
}

fn at(layer: usize) -> impl Fn(routeprune_core::Error) -> PipelineError {
    move |source| PipelineError::Layer { layer, source }
}

/// The trace named by the config, loaded or generated.
pub fn resolve_trace(config: &RunConfig) -> Result<Trace, PipelineError> {
    config.validate()?;
    match (&config.synthetic, &config.trace) {
        (Some(spec), _) => Ok(generate_synthetic(spec)?),
        (_, Some(src)) => Ok(load_trace(&src.path)?),
        _ => unreachable!("validated above"),
    }
}

pub fn run_pipeline(config: &RunConfig) -> Result<RunReport, PipelineError> {
    let trace = resolve_trace(config)?;
    run_on_trace(&trace, config)
}

#[derive(Debug, Clone)]
struct Group {
    modality: Modality,
    members: Vec<usize>,
}

fn summarize(trace: &Trace) -> SourceSummary {
    let m = &trace.metadata;
    let nv = trace.num_vision();
    SourceSummary {
        model: m.model.clone(),
        num_layers: m.num_layers,
        num_tokens: m.num_tokens,
        num_vision: nv,
        num_text: m.num_tokens - nv,
        num_experts: m.num_experts,
        top_k: m.top_k,
        num_shared: m.num_shared,
    }
}

pub fn run_on_trace(trace: &Trace, config: &RunConfig) -> Result<RunReport, PipelineError> {
    trace.validate()?;
    let moe = trace.moe_config();
    let schedule = config.pruning.schedule()?;
    if let Some(&l) = schedule.prune_layers.iter().find(|&&l| l >= moe.num_layers) {
        return Err(ConfigError::Invalid(format!(
            "prune layer {l} is past the last layer {}",
            moe.num_layers - 1
        ))
        .into());
    }
    let policy = if config.reduction.enabled() {
        let p = config.reduction.policy(moe.num_layers, moe.top_k)?;
        p.validate(&moe)
            .map_err(|e| ConfigError::Invalid(format!("reduction: {e}")))?;
        Some(p)
    } else {
        None
    };

    let full_mask = trace.mask();
    let vision_ordinal: Vec<usize> = {
        let mut v = 0;
        full_mask
            .labels()
            .iter()
            .map(|&m| {
                let o = v;
                if m == Modality::Vision {
                    v += 1;
                }
                o
            })
            .collect()
    };
    let mut groups: Vec<Group> = full_mask
        .labels()
        .iter()
        .enumerate()
        .map(|(i, &modality)| Group {
            modality,
            members: vec![i],
        })
        .collect();

    let mut layers = Vec::with_capacity(moe.num_layers);
    let mut stages = Vec::new();
    let mut stability = Vec::new();
    let mut warnings = Vec::new();
    let (mut routed, mut baseline_routed) = (0usize, 0usize);

    for l in 0..moe.num_layers {
        let full = trace.routing(l)?;
        let dist = group_routing(&full, &groups).map_err(at(l))?;
        let mask = ModalityMask::new(groups.iter().map(|g| g.modality).collect());

        let gates = match &policy {
            Some(p) if l >= p.start_layer => apply_reduction(&dist, &mask, l, p, &moe),
            _ => baseline_gating(&dist, &moe),
        }
        .map_err(at(l))?;
        let prune_here = schedule.prune_layers.contains(&l);
        let record = LayerRecord {
            layer: l,
            tokens: groups.len(),
            vision_tokens: mask.count(Modality::Vision),
            text_tokens: mask.count(Modality::Text),
            routed_evaluations: gates.routed_evaluations(),
            shared_evaluations: gates.shared_evaluations(),
            reduced_tokens: gates.reduced_tokens(),
            baseline_routed_evaluations: trace.metadata.num_tokens * moe.top_k,
            baseline_shared_evaluations: trace.metadata.num_tokens * moe.num_shared,
            pruned_here: prune_here,
        };
        routed += record.routed_evaluations;
        baseline_routed += record.baseline_routed_evaluations;
        layers.push(record);

        if let Some(norms) = &trace.layers[l].expert_norms {
            stability.push(layer_stability(l, norms, &full_mask).map_err(at(l))?);
        }

        if prune_here {
            let (stage, next) =
                prune_stage(trace, l, &groups, &dist, &mask, &vision_ordinal, &schedule)?;
            for w in &stage.plan.warnings {
                warnings.push(match w {
                    PlanWarning::MergeCountClamped { requested, used } => {
                        format!("layer {l}: merge count clamped from {requested} to {used}")
                    }
                    PlanWarning::ZeroAttention => {
                        format!("layer {l}: all vision attention is zero")
                    }
                });
            }
            groups = next;
            stages.push(stage);
        }
    }

    let bound = gamma_upper_bound(schedule.beta, schedule.window).ok();
    let gamma = GammaCheck {
        gamma: schedule.gamma,
        beta: schedule.beta,
        window: schedule.window,
        bound,
        exceeds_bound: bound.is_some_and(|b| schedule.gamma > b),
    };
    if gamma.exceeds_bound {
        warnings.push(format!(
            "gamma {} exceeds the feasible bound {:.6} for beta {} and window {}",
            schedule.gamma,
            bound.unwrap_or_default(),
            schedule.beta,
            schedule.window
        ));
    }

    let run_flops = run_flops_config(trace, &schedule, policy.as_ref())?;
    let preset = match &config.flops {
        Some(f) if f.preset.is_some() => Some(flops_summary(
            &preset_flops_config(f, &schedule, policy.as_ref(), &moe)?,
            f.preset.unwrap_or(Schedule::Custom),
        )?),
        _ => None,
    };
    let flops = FlopsSection {
        run: flops_summary(&run_flops, Schedule::Custom)?,
        preset,
        measured_routed_ratio: if baseline_routed == 0 {
            1.0
        } else {
            routed as f64 / baseline_routed as f64
        },
    };

    Ok(RunReport {
        schema_version: SCHEMA_VERSION,
        source: summarize(trace),
        reduction: policy,
        schedule,
        gamma,
        final_vision_tokens: groups
            .iter()
            .filter(|g| g.modality == Modality::Vision)
            .count(),
        layers,
        stages,
        stability,
        flops,
        warnings,
    })
}

fn group_routing(
    full: &RoutingDistribution,
    groups: &[Group],
) -> routeprune_core::Result<RoutingDistribution> {
    let e = full.num_experts();
    let mut data = Vec::with_capacity(groups.len() * e);
    for g in groups {
        if let [i] = g.members[..] {
            data.extend_from_slice(full.row(i));
        } else {
            let n = g.members.len() as f64;
            let mut row = vec![0.0; e];
            for &i in &g.members {
                for (acc, p) in row.iter_mut().zip(full.row(i)) {
                    *acc += p;
                }
            }
            data.extend(row.into_iter().map(|s| s / n));
        }
    }
    RoutingDistribution::new(Matrix::from_vec(groups.len(), e, data)?)
}

fn prune_stage(
    trace: &Trace,
    l: usize,
    groups: &[Group],
    dist: &RoutingDistribution,
    mask: &ModalityMask,
    vision_ordinal: &[usize],
    schedule: &PruneSchedule,
) -> Result<(StageRecord, Vec<Group>), PipelineError> {
    let layer = &trace.layers[l];
    let vpos = mask.positions(Modality::Vision);
    let n_v = vpos.len();
    let attn: Vec<f64> = vpos
        .iter()
        .map(|&p| {
            groups[p]
                .members
                .iter()
                .map(|&i| layer.attention[vision_ordinal[i]])
                .sum()
        })
        .collect();
    let vdist = dist.select_rows(&vpos);
    let view = window_partition(n_v, schedule.window).map_err(at(l))?;
    let scores =
        score_windows(&vdist, &attn, &view, schedule.alpha, schedule.similarity).map_err(at(l))?;
    let target = round_half_up(schedule.beta * n_v as f64);
    let plan = plan_pruning(target, schedule, &scores, &attn, &view).map_err(at(l))?;

    let (kept, dropped, absorbed) = (plan.kept_positions.len(), plan.dropped(), plan.absorbed());
    if kept != target || kept + dropped + absorbed != n_v {
        return Err(PipelineError::Invariant {
            layer: l,
            message: format!(
                "kept {kept} + dropped {dropped} + absorbed {absorbed} != {n_v} (target {target})"
            ),
        });
    }

    let hidden_tokens_after = match trace.hidden(l) {
        Some(h) => {
            let h = h?;
            let rows = groups
                .iter()
                .map(|g| {
                    let members: Vec<&[f64]> = g.members.iter().map(|&i| h.token(i)).collect();
                    if members.len() == 1 {
                        Ok(members[0].to_vec())
                    } else {
                        merge_tokens(&members, schedule.merge)
                    }
                })
                .collect::<routeprune_core::Result<Vec<_>>>()
                .map_err(at(l))?;
            let grouped = Matrix::from_rows(&rows, h.hidden_dim())
                .and_then(HiddenState::new)
                .map_err(at(l))?;
            let (after, _) = apply_plan(&grouped, mask, &plan, schedule.merge).map_err(at(l))?;
            Some(after.num_tokens())
        }
        None => None,
    };

    let vision_groups: Vec<&Group> = vpos.iter().map(|&p| &groups[p]).collect();
    let merged_members = plan
        .merged
        .iter()
        .map(|m| {
            vision_groups[m.start..m.end]
                .iter()
                .flat_map(|g| g.members.iter().map(|&i| vision_ordinal[i]))
                .collect()
        })
        .collect();

    let mut next = Vec::with_capacity(groups.len() - n_v + target);
    let mut kept_iter = plan.kept_positions.iter().peekable();
    let mut v = 0;
    for g in groups {
        if g.modality == Modality::Text {
            next.push(g.clone());
            continue;
        }
        if kept_iter.next_if_eq(&&v).is_some() {
            next.push(match plan.merged.iter().find(|m| m.position == v) {
                Some(m) => Group {
                    modality: Modality::Vision,
                    members: vision_groups[m.start..m.end]
                        .iter()
                        .flat_map(|g| g.members.iter().copied())
                        .collect(),
                },
                None => g.clone(),
            });
        }
        v += 1;
    }

    Ok((
        StageRecord {
            layer: l,
            vision_before: n_v,
            target,
            vision_kept: kept,
            vision_dropped: dropped,
            vision_absorbed: absorbed,
            merge_windows: plan.merge_windows(),
            merged_members,
            hidden_tokens_after,
            scores,
            plan,
        },
        next,
    ))
}

fn flops_summary(config: &FlopsConfig, schedule: Schedule) -> Result<FlopsSummary, PipelineError> {
    Ok(FlopsSummary {
        prune: ratio_prune(config, schedule)?,
        act: ratio_act(config, schedule)?,
        combined: ratio_combined(config, schedule)?,
    })
}

fn reduced_k(policy: Option<&ReductionPolicy>, top_k: usize) -> Result<usize, PipelineError> {
    Ok(match policy {
        None => top_k,
        Some(p) => match p.reduced {
            ReducedCount::Count(k) => k.min(top_k),
            ReducedCount::Ratio(_) => p.reduced_count(top_k)?,
        },
    })
}

/// FLOPs model with the run's own dimensions.
fn run_flops_config(
    trace: &Trace,
    schedule: &PruneSchedule,
    policy: Option<&ReductionPolicy>,
) -> Result<FlopsConfig, PipelineError> {
    let m = &trace.metadata;
    let inter = m.expert_dim.unwrap_or(1);
    Ok(FlopsConfig {
        batch: 1,
        total_tokens: m.num_tokens,
        vision_tokens: trace.num_vision(),
        hidden: m.hidden_dim,
        heads: 1,
        head_dim: m.hidden_dim,
        dense_intermediate: inter,
        expert_intermediate: inter,
        num_experts: m.num_experts,
        top_k: m.top_k,
        reduced_k: reduced_k(policy, m.top_k)?,
        num_shared: m.num_shared,
        reduction_start: policy.map_or(m.num_layers, |p| p.start_layer),
        num_layers: m.num_layers,
        dense_layers: Vec::new(),
        prune_layers: schedule.prune_layers.clone(),
        beta: schedule.beta,
    })
}

/// A preset with the run's retention and reduction, unless overridden.
fn preset_flops_config(
    section: &FlopsOverrides,
    schedule: &PruneSchedule,
    policy: Option<&ReductionPolicy>,
    moe: &MoeConfig,
) -> Result<FlopsConfig, PipelineError> {
    let (_, mut c) = section.resolve()?;
    if section.beta.is_none() {
        c.beta = schedule.beta;
    }
    if section.reduced_k.is_none() {
        c.reduced_k = match policy.map(|p| p.reduced) {
            Some(ReducedCount::Ratio(p)) => {
                routeprune_core::reduction::resolve_reduced_count(c.top_k, p)?
            }
            // a fixed count keeps the run's reduced fraction
            Some(ReducedCount::Count(k)) => {
                round_half_up(c.top_k as f64 * k as f64 / moe.top_k as f64)
            }
            None => c.top_k,
        };
    }
    if section.reduction_start.is_none() {
        c.reduction_start = policy.map_or(c.num_layers, |p| p.start_layer.min(c.num_layers));
    }
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::SyntheticSpec;

    fn config(spec: SyntheticSpec) -> RunConfig {
        RunConfig {
            synthetic: Some(spec),
            ..RunConfig::default()
        }
    }

    #[test]
    fn three_stage_counts() {
        let mut spec = SyntheticSpec::new(5, 300, 8, 16, 4);
        spec.num_layers = 10;
        let mut c = config(spec);
        c.pruning.prune_layers = vec![2, 5, 8];
        c.pruning.retention = Some(0.25);
        let r = run_pipeline(&c).unwrap();
        let counts: Vec<usize> = r.stages.iter().map(|s| s.target).collect();
        assert_eq!(counts, [189, 119, 75]);
        assert_eq!(r.final_vision_tokens, 75);
        assert_eq!(r.layers[9].vision_tokens, 75);
        assert_eq!(r.layers[2].vision_tokens, 300);
        assert_eq!(r.layers[3].vision_tokens, 189);
    }

    #[test]
    fn no_op_matches_baseline() {
        let spec = SyntheticSpec::new(9, 40, 4, 8, 2);
        let mut c = config(spec);
        c.pruning.prune_layers = vec![1];
        c.pruning.beta = Some(1.0);
        let r = run_pipeline(&c).unwrap();
        for l in &r.layers {
            assert_eq!(l.tokens, 44);
            assert_eq!(l.routed_evaluations, l.baseline_routed_evaluations);
        }
        assert_eq!(r.flops.run.combined.ratio(), 1.0);
    }
}
