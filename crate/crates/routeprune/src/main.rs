use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use routeprune::config::{ConfigError, FlopsSection, RunConfig, TraceSource};
use routeprune::pipeline::{resolve_trace, run_pipeline, PipelineError};
use routeprune::report::{
    analysis_csv, gamma_reference_table, heatmap_csv, layers_csv, stages_csv, to_json, write_files,
    AnalysisLayer, AnalysisReport, FlopsCliReport, RetentionRow, SourceSummary, SCHEMA_VERSION,
};
use routeprune::synthetic::{SyntheticError, SyntheticSpec};
use routeprune::trace::{load_trace, save_trace, TraceError};
use routeprune_core::flops::{ratio_act, ratio_combined, ratio_prune, savings_heatmap, Schedule};
use routeprune_core::pruning::{MergeMode, SimilarityMode};
use routeprune_core::reduction::{Strategy, TargetModality};
use routeprune_core::theory::{
    adjacent_routing_similarity, layer_stability, stage_beta, topk_prob_sum,
};

/// Stdout writes that end the process quietly when the reader goes away.
macro_rules! out {
    ($($t:tt)*) => { emit(&format!($($t)*)) };
}
macro_rules! outln {
    ($($t:tt)*) => { emit(&format!("{}\n", format_args!($($t)*))) };
}

fn emit(s: &str) {
    use std::io::Write;
    if std::io::stdout().lock().write_all(s.as_bytes()).is_err() {
        std::process::exit(0);
    }
}

#[derive(Parser)]
#[command(
    name = "routeprune",
    version,
    about = "Routing-aware token pruning and expert reduction for MoE vision-language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace and run the full pipeline on it.
    Simulate(SimulateArgs),
    /// Run the pipeline on a captured trace.
    Prune(PruneArgs),
    /// Analytical FLOPs ratios for a preset or custom model.
    Flops(FlopsArgs),
    /// Stability, routing-similarity and top-k statistics of a trace.
    Analyze(AnalyzeArgs),
    /// Check a trace file and report the first problem found.
    Validate { trace: PathBuf },
}

#[derive(Args, Default)]
struct SyntheticFlags {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_vision: Option<usize>,
    #[arg(long)]
    num_text: Option<usize>,
    #[arg(long)]
    num_experts: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    num_shared: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    block_len: Option<usize>,
    #[arg(long)]
    block_similarity: Option<f64>,
    /// Planted block start positions in the vision subsequence.
    #[arg(long, value_delimiter = ',')]
    blocks: Option<Vec<usize>>,
}

#[derive(Args, Default)]
struct RunFlags {
    #[arg(long)]
    start_layer: Option<usize>,
    #[arg(long, conflicts_with = "ratio")]
    reduced: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<Strategy>,
    #[arg(long, value_parser = parse_target)]
    target: Option<TargetModality>,
    #[arg(long)]
    reduce_shared: bool,
    #[arg(long, value_delimiter = ',')]
    prune_layers: Option<Vec<usize>>,
    #[arg(long, conflicts_with = "beta")]
    retention: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, value_parser = parse_similarity)]
    similarity: Option<SimilarityMode>,
    #[arg(long, value_parser = parse_merge)]
    merge: Option<MergeMode>,
    #[arg(long, value_parser = parse_schedule)]
    preset: Option<Schedule>,
    /// Report directory; without it the JSON report goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    synthetic: SyntheticFlags,
    #[command(flatten)]
    run: RunFlags,
    /// Also write the generated trace.
    #[arg(long)]
    save_trace: Option<PathBuf>,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    run: RunFlags,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, value_parser = parse_schedule, default_value = "internvl48")]
    preset: Schedule,
    /// TOML file with a [flops] table of overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.75, 0.5, 0.25])]
    retention: Vec<f64>,
    #[arg(long)]
    reduced_k: Option<usize>,
    #[arg(long)]
    start_layer: Option<usize>,
    /// Write the (start layer x reduced count) savings grid as CSV.
    #[arg(long)]
    heatmap: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Defaults to the trace's top_k.
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    match s.to_ascii_lowercase().as_str() {
        "topk" => Ok(Strategy::TopK),
        "randomk" => Ok(Strategy::RandomK),
        "mink" => Ok(Strategy::MinK),
        _ => Err(format!("unknown strategy `{s}` (topk, randomk, mink)")),
    }
}

fn parse_target(s: &str) -> Result<TargetModality, String> {
    match s.to_ascii_lowercase().as_str() {
        "vision" => Ok(TargetModality::Vision),
        "text" => Ok(TargetModality::Text),
        "all" => Ok(TargetModality::All),
        _ => Err(format!("unknown target `{s}` (vision, text, all)")),
    }
}

fn parse_similarity(s: &str) -> Result<SimilarityMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "exact" => Ok(SimilarityMode::Exact),
        "approx" => Ok(SimilarityMode::Approx),
        _ => Err(format!("unknown similarity mode `{s}` (exact, approx)")),
    }
}

fn parse_merge(s: &str) -> Result<MergeMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "mean" => Ok(MergeMode::Mean),
        "mlerp" => Ok(MergeMode::Mlerp),
        _ => Err(format!("unknown merge mode `{s}` (mean, mlerp)")),
    }
}

fn parse_schedule(s: &str) -> Result<Schedule, String> {
    Schedule::parse(s)
        .ok_or_else(|| format!("unknown schedule `{s}` (deepseek30, internvl48, custom)"))
}

/// Exit status 1: the inputs are wrong. Exit status 2: something failed while
/// running on valid inputs.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Runtime(e.into()),
            _ => Failure::Validation(e.into()),
        }
    }
}

impl From<TraceError> for Failure {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::Io { .. } => Failure::Runtime(e.into()),
            _ => Failure::Validation(e.into()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(c) => c.into(),
            PipelineError::Trace(t) => t.into(),
            PipelineError::Synthetic(_) => Failure::Validation(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<SyntheticError> for Failure {
    fn from(e: SyntheticError) -> Self {
        Failure::Validation(e.into())
    }
}

impl From<routeprune_core::Error> for Failure {
    fn from(e: routeprune_core::Error) -> Self {
        Failure::Validation(e.into())
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn apply_synthetic(flags: &SyntheticFlags, spec: Option<SyntheticSpec>) -> SyntheticSpec {
    let mut s = spec.unwrap_or_else(|| {
        let mut s = SyntheticSpec::new(0, 256, 16, 16, 4);
        s.num_layers = 12;
        s
    });
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = &flags.$f { s.$f = v.clone(); } )* };
    }
    set!(
        seed,
        num_vision,
        num_text,
        num_experts,
        top_k,
        num_shared,
        hidden_dim,
        num_layers,
        block_len,
        block_similarity,
        blocks
    );
    s
}

fn apply_run(flags: &RunFlags, c: &mut RunConfig) {
    let r = &mut c.reduction;
    if flags.start_layer.is_some() {
        r.start_layer = flags.start_layer;
    }
    if flags.reduced.is_some() {
        r.reduced = flags.reduced;
        r.ratio = None;
    }
    if flags.ratio.is_some() {
        r.ratio = flags.ratio;
        r.reduced = None;
    }
    if let Some(s) = flags.strategy {
        r.strategy = s;
    }
    if let Some(t) = flags.target {
        r.target = t;
    }
    r.reduce_shared |= flags.reduce_shared;

    let p = &mut c.pruning;
    if let Some(l) = &flags.prune_layers {
        p.prune_layers = l.clone();
    }
    if flags.retention.is_some() {
        p.retention = flags.retention;
        p.beta = None;
    }
    if flags.beta.is_some() {
        p.beta = flags.beta;
        p.retention = None;
    }
    if let Some(w) = flags.window {
        p.window = w;
    }
    if let Some(a) = flags.alpha {
        p.alpha = a;
    }
    if let Some(g) = flags.gamma {
        p.gamma = g;
    }
    if let Some(s) = flags.similarity {
        p.similarity = s;
    }
    if let Some(m) = flags.merge {
        p.merge = m;
    }
    if let Some(s) = flags.preset {
        c.flops.get_or_insert_with(FlopsSection::default).preset = Some(s);
    }
    if flags.out.is_some() {
        c.output.dir = flags.out.clone();
    }
}

fn execute(config: &RunConfig) -> Result<(), Failure> {
    let report = run_pipeline(config)?;
    let json = to_json(&report);
    match &config.output.dir {
        Some(dir) => {
            let written = write_files(
                dir,
                &[
                    ("report.json", json.into_bytes()),
                    ("layers.csv", layers_csv(&report)),
                    ("stages.csv", stages_csv(&report)),
                ],
            )
            .with_context(|| format!("writing reports to {}", dir.display()))?;
            for p in written {
                eprintln!("wrote {}", p.display());
            }
        }
        None => out!("{json}"),
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.as_deref())?;
    if config.trace.is_some() {
        return Err(Failure::Validation(anyhow::anyhow!(
            "simulate needs a [synthetic] source; use `prune` for traces"
        )));
    }
    config.synthetic = Some(apply_synthetic(&args.synthetic, config.synthetic.take()));
    apply_run(&args.run, &mut config);
    if let Some(path) = &args.save_trace {
        let trace = resolve_trace(&config)?;
        save_trace(&trace, path)?;
    }
    execute(&config)
}

fn prune(args: PruneArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(path) = args.trace {
        config.synthetic = None;
        config.trace = Some(TraceSource { path });
    }
    if config.trace.is_none() {
        return Err(Failure::Validation(anyhow::anyhow!(
            "prune needs --trace or a [trace] table"
        )));
    }
    apply_run(&args.run, &mut config);
    execute(&config)
}

fn flops(args: FlopsArgs) -> Result<(), Failure> {
    let mut section = match &args.config {
        Some(p) => RunConfig::load(p)?.flops.unwrap_or_default(),
        None => FlopsSection::default(),
    };
    section.preset = Some(args.preset);
    if args.reduced_k.is_some() {
        section.reduced_k = args.reduced_k;
    }
    if args.start_layer.is_some() {
        section.reduction_start = args.start_layer;
    }
    let (schedule, base) = section.resolve()?;

    let mut retention = Vec::with_capacity(args.retention.len());
    for &r in &args.retention {
        let beta = stage_beta(r, base.prune_layers.len().max(1))?;
        let mut c = base.clone();
        c.beta = beta;
        retention.push(RetentionRow {
            retention: r,
            stage_beta: beta,
            prune: ratio_prune(&c, schedule)?,
            combined: ratio_combined(&c, schedule)?,
        });
    }
    let report = FlopsCliReport {
        schema_version: SCHEMA_VERSION,
        schedule,
        config: base.clone(),
        act: ratio_act(&base, schedule)?,
        retention,
        gamma_table: gamma_reference_table(),
    };

    outln!(
        "schedule {}  L_v={} L={}",
        schedule.name(),
        base.vision_tokens,
        base.total_tokens
    );
    outln!(
        "{:>9} {:>8} {:>18} {:>18}",
        "retention",
        "beta",
        "vision-only saved",
        "whole-seq saved"
    );
    for row in &report.retention {
        outln!(
            "{:>8.0}% {:>8.4} {:>17.2}% {:>17.2}%",
            row.retention * 100.0,
            row.stage_beta,
            row.prune.vision_only.savings * 100.0,
            row.prune.whole_sequence.savings * 100.0
        );
    }
    outln!(
        "expert reduction (start {}, K_v {}): vision-only {:.2}%, whole-seq {:.2}%",
        base.reduction_start,
        base.reduced_k,
        report.act.vision_only.savings * 100.0,
        report.act.whole_sequence.savings * 100.0
    );
    outln!("merge-rate bound (W=5):");
    for g in &report.gamma_table {
        outln!(
            "  beta {:.2}: bound {:.4}, reference {:.3}{}",
            g.beta,
            g.bound,
            g.reference,
            if g.discrepancy {
                "  [differs from the formula]"
            } else {
                ""
            }
        );
    }

    if let Some(path) = &args.heatmap {
        let starts: Vec<usize> = (0..base.num_layers).collect();
        let counts: Vec<usize> = (0..=base.top_k).collect();
        let h = savings_heatmap(&base, schedule, &starts, &counts)?;
        std::fs::write(path, heatmap_csv(&h))
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    if let Some(path) = &args.json {
        std::fs::write(path, to_json(&report))
            .with_context(|| format!("writing {}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<(), Failure> {
    let mut config = load_config(args.config.as_deref())?;
    if let Some(path) = args.trace {
        config.synthetic = None;
        config.trace = Some(TraceSource { path });
    }
    let trace = resolve_trace(&config)?;
    let mask = trace.mask();
    let k = args.top_k.unwrap_or(trace.metadata.top_k);
    let mut layers = Vec::with_capacity(trace.layers.len());
    for l in 0..trace.layers.len() {
        let dist = trace.routing(l)?;
        let (sv, st) = adjacent_routing_similarity(&dist, &mask, args.window)?;
        let (kv, kt) = topk_prob_sum(&dist, &mask, k)?;
        let stability = trace.layers[l]
            .expert_norms
            .as_ref()
            .map(|n| layer_stability(l, n, &mask))
            .transpose()?;
        layers.push(AnalysisLayer {
            layer: l,
            adjacent_similarity_vision: sv,
            adjacent_similarity_text: st,
            topk_mass_vision: kv,
            topk_mass_text: kt,
            stability,
        });
    }
    let nv = trace.num_vision();
    let m = &trace.metadata;
    let report = AnalysisReport {
        schema_version: SCHEMA_VERSION,
        source: SourceSummary {
            model: m.model.clone(),
            num_layers: m.num_layers,
            num_tokens: m.num_tokens,
            num_vision: nv,
            num_text: m.num_tokens - nv,
            num_experts: m.num_experts,
            top_k: m.top_k,
            num_shared: m.num_shared,
        },
        window: args.window,
        top_k: k,
        layers,
    };
    match &args.out {
        Some(dir) => {
            write_files(
                dir,
                &[
                    ("analysis.json", to_json(&report).into_bytes()),
                    ("analysis.csv", analysis_csv(&report)),
                ],
            )
            .with_context(|| format!("writing reports to {}", dir.display()))?;
        }
        None => out!("{}", to_json(&report)),
    }
    Ok(())
}

fn validate(path: &Path) -> Result<(), Failure> {
    let t = load_trace(path)?;
    outln!(
        "ok: {} layers, {} tokens ({} vision), {} experts, top-{}",
        t.metadata.num_layers,
        t.metadata.num_tokens,
        t.num_vision(),
        t.metadata.num_experts,
        t.metadata.top_k
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Prune(a) => prune(a),
        Command::Flops(a) => flops(a),
        Command::Analyze(a) => analyze(a),
        Command::Validate { trace } => validate(&trace),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("invalid input: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
