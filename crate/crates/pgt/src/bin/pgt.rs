//! Command-line harness: training, probing, adaptive-token sweeps,
//! inference, analytic cost reports, and attention-map export.
//!
//! Exit codes: 0 success, 1 usage/configuration error, 2 numerical failure
//! (a non-finite value was detected).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pgt::analysis::{self, attn::export_attention_maps, cost, AttnMatrix};
use pgt::augment::bilinear_resize;
use pgt::config::{load_config, DatasetSpec, FileConfig};
use pgt::data::{read_image, Dataset, Split};
use pgt::grouping::BarrierTap;
use pgt::model;
use pgt::params::Binding;
use pgt::rng::StreamKey;
use pgt::ssl::probe::{linear_probe, summary_features};
use pgt::ssl::trainer::{self, TrainState};
use pgt::ssl::TrainError;
use pgt::tensor::{Dtype, Element, Tape};

#[derive(Parser)]
#[command(name = "pgt", version, about = "Group-token vision backbone harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised training on the configured dataset
    Train(TrainArgs),
    /// Linear probe on frozen summary features (optionally a token sweep)
    Probe(ProbeArgs),
    /// Forward the evaluation split; write summaries and an entropy report
    Infer(InferArgs),
    /// Analytic FLOP report
    Flops(ReportArgs),
    /// Analytic peak activation-memory report
    Memory(MemoryArgs),
    /// Export assignment attention maps as PGM images
    ExportAttn(ExportArgs),
}

#[derive(Args)]
struct Shared {
    /// Model/training config file
    #[arg(long)]
    config: PathBuf,
    /// Root seed; every random stream derives from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads (default: all cores)
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    shared: Shared,
    /// Output directory (checkpoint, metrics, run metadata)
    #[arg(long)]
    out: PathBuf,
    /// Stop after this step (schedule horizons still follow train.steps)
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    out: PathBuf,
    /// Trained checkpoint to probe
    #[arg(long)]
    checkpoint: PathBuf,
    /// Group-token count at inference (default: the trained count)
    #[arg(long)]
    group_tokens: Option<usize>,
    /// Comma-separated token counts for an adaptive sweep
    #[arg(long)]
    sweep_tokens: Option<String>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    group_tokens: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    #[command(flatten)]
    shared: Shared,
    /// Write JSON reports here (stdout only when absent)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    group_tokens: Option<usize>,
    #[arg(long)]
    sweep_tokens: Option<String>,
}

#[derive(Args)]
struct MemoryArgs {
    #[command(flatten)]
    report: ReportArgs,
    /// Compare against a baseline ("self-attn")
    #[arg(long)]
    baseline: Option<String>,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    shared: Shared,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to visualize (default: seed-initialized parameters)
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    group_tokens: Option<usize>,
    /// Input image (PPM/PGM); default: first evaluation-split sample
    #[arg(long)]
    image: Option<PathBuf>,
    /// Comma-separated layer indices (default: all)
    #[arg(long)]
    layers: Option<String>,
    /// Comma-separated head indices (default: all)
    #[arg(long)]
    heads: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Numerical(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numerical(m) => write!(f, "{m}"),
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Usage(e.to_string())
}

fn from_train_error(e: TrainError) -> CliError {
    if e.is_numerical() {
        CliError::Numerical(e.to_string())
    } else {
        CliError::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            eprintln!("{e}");
            return ExitCode::from(1);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Numerical(m)) => {
            eprintln!("numerical failure: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => train_dispatch(a),
        Command::Probe(a) => {
            let fc = setup(&a.shared)?;
            match fc.train.precision {
                Dtype::F32 => probe_cmd::<f32>(&a, &fc),
                Dtype::F64 => probe_cmd::<f64>(&a, &fc),
            }
        }
        Command::Infer(a) => {
            let fc = setup(&a.shared)?;
            match fc.train.precision {
                Dtype::F32 => infer_cmd::<f32>(&a, &fc),
                Dtype::F64 => infer_cmd::<f64>(&a, &fc),
            }
        }
        Command::Flops(a) => flops_cmd(a),
        Command::Memory(a) => memory_cmd(a),
        Command::ExportAttn(a) => {
            let fc = setup(&a.shared)?;
            match fc.train.precision {
                Dtype::F32 => export_cmd::<f32>(&a, &fc),
                Dtype::F64 => export_cmd::<f64>(&a, &fc),
            }
        }
    }
}

fn setup(shared: &Shared) -> Result<FileConfig, CliError> {
    if let Some(jobs) = shared.jobs {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    load_config(&shared.config).map_err(usage)
}

fn dataset_for(fc: &FileConfig) -> Result<Dataset, CliError> {
    match &fc.dataset.spec {
        DatasetSpec::Synthetic => Ok(Dataset::synthetic(0xDA7A, fc.model.image_size)),
        DatasetSpec::Dir(path) => {
            let ds = Dataset::from_dir(path).map_err(usage)?;
            Ok(resize_dataset(ds, fc.model.image_size))
        }
    }
}

fn resize_dataset(ds: Dataset, size: usize) -> Dataset {
    match ds {
        Dataset::Labeled { items, n_classes } => Dataset::Labeled {
            items: items
                .into_iter()
                .map(|(img, y)| {
                    if img.height == size && img.width == size {
                        (img, y)
                    } else {
                        (bilinear_resize(&img, size, size), y)
                    }
                })
                .collect(),
            n_classes,
        },
        other => other,
    }
}

fn write_run_meta(
    out: &Path,
    command: &str,
    shared: &Shared,
    extra: serde_json::Value,
) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(usage)?;
    let meta = serde_json::json!({
        "command": command,
        "seed": shared.seed,
        "config": shared.config.display().to_string(),
        "extra": extra,
    });
    std::fs::write(
        out.join("run.json"),
        serde_json::to_vec_pretty(&meta).expect("serializable"),
    )
    .map_err(usage)
}

fn parse_csv(s: &str) -> Result<Vec<usize>, CliError> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| CliError::Usage(format!("bad token count '{t}' in list")))
        })
        .collect()
}

fn check_override(m: Option<usize>) -> Result<(), CliError> {
    if m == Some(0) {
        return Err(CliError::Usage(
            "--group-tokens must be at least 1".to_string(),
        ));
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

fn train_dispatch(a: TrainArgs) -> Result<(), CliError> {
    let fc = setup(&a.shared)?;
    match fc.train.precision {
        Dtype::F32 => train_cmd::<f32>(&a, fc),
        Dtype::F64 => train_cmd::<f64>(&a, fc),
    }
}

fn train_cmd<S: Element>(a: &TrainArgs, fc: FileConfig) -> Result<(), CliError> {
    let dataset = dataset_for(&fc)?;
    let total = a.steps.unwrap_or(fc.train.steps);
    write_run_meta(
        &a.out,
        "train",
        &a.shared,
        serde_json::json!({"steps": total, "precision": fc.train.precision.name()}),
    )?;
    let ck = a.out.join("checkpoint.pgt");
    let mut state: TrainState<S> = if ck.exists() {
        let st = trainer::load_state(&ck, fc.train.weight_decay).map_err(from_train_error)?;
        eprintln!("resuming from {} at step {}", ck.display(), st.step);
        st
    } else {
        trainer::init_state(&fc, a.shared.seed).map_err(from_train_error)?
    };
    if state.step >= total {
        eprintln!("checkpoint already at step {}; nothing to do", state.step);
        return Ok(());
    }
    trainer::run_training(
        &mut state,
        &fc,
        &dataset,
        a.shared.seed,
        total,
        &a.out,
        |m| {
            if m.step % 50 == 0 || m.step == total || m.step == 1 {
                eprintln!(
                    "step {:>6} loss {:.5} teacher-entropy {:.3} lr {:.2e}",
                    m.step, m.loss, m.teacher_entropy, m.lr
                );
            }
        },
    )
    .map_err(from_train_error)?;
    println!("trained to step {total}; checkpoint at {}", ck.display());
    Ok(())
}

// ── probe ────────────────────────────────────────────────────────────

#[derive(serde::Serialize)]
struct ProbeRow {
    group_tokens: usize,
    accuracy: f64,
    trained_at: bool,
}

fn probe_cmd<S: Element>(a: &ProbeArgs, fc: &FileConfig) -> Result<(), CliError> {
    check_override(a.group_tokens)?;
    let dataset = dataset_for(fc)?;
    let student = trainer::load_student::<S>(&a.checkpoint).map_err(from_train_error)?;
    let train_m = fc.model.blocks[0].grouping.n_group_tokens;
    let sweep: Vec<usize> = match (&a.sweep_tokens, a.group_tokens) {
        (Some(list), _) => parse_csv(list)?,
        (None, Some(m)) => vec![m],
        (None, None) => vec![train_m],
    };
    if sweep.iter().any(|&m| m == 0) {
        return Err(CliError::Usage("token counts must be at least 1".into()));
    }
    write_run_meta(
        &a.out,
        "probe",
        &a.shared,
        serde_json::json!({"checkpoint": a.checkpoint.display().to_string(), "sweep": sweep}),
    )?;
    let rows = adaptive_sweep::<S>(&student, fc, &dataset, &sweep, a.shared.seed)?;
    println!("{:>12}  {:>8}  trained_at", "group_tokens", "accuracy");
    for r in &rows {
        println!(
            "{:>12}  {:>8.4}  {}",
            r.group_tokens,
            r.accuracy,
            if r.trained_at { "*" } else { "" }
        );
    }
    std::fs::write(
        a.out.join("probe_report.json"),
        serde_json::to_vec_pretty(&rows).expect("serializable"),
    )
    .map_err(usage)?;
    Ok(())
}

fn adaptive_sweep<S: Element>(
    student: &pgt::params::ParameterStore<S>,
    fc: &FileConfig,
    dataset: &Dataset,
    sweep: &[usize],
    seed: u64,
) -> Result<Vec<ProbeRow>, CliError> {
    let key = StreamKey::root(seed).child_str("probe-features");
    let train_m = fc.model.blocks[0].grouping.n_group_tokens;
    let mut rows = Vec::new();
    for &m in sweep {
        let over = if m == train_m { None } else { Some(m) };
        let (tx, ty) = summary_features(
            student,
            &fc.model,
            dataset,
            Split::ProbeTrain,
            fc.train.probe_train,
            over,
            key,
        )
        .map_err(|e| from_train_error(TrainError::Probe(e)))?;
        let (ex, ey) = summary_features(
            student,
            &fc.model,
            dataset,
            Split::ProbeTest,
            fc.train.probe_test,
            over,
            key,
        )
        .map_err(|e| from_train_error(TrainError::Probe(e)))?;
        let accuracy = linear_probe(&tx, &ty, &ex, &ey, dataset.n_classes()).map_err(usage)?;
        rows.push(ProbeRow {
            group_tokens: m,
            accuracy,
            trained_at: m == train_m,
        });
    }
    Ok(rows)
}

// ── infer ────────────────────────────────────────────────────────────

fn infer_cmd<S: Element>(a: &InferArgs, fc: &FileConfig) -> Result<(), CliError> {
    check_override(a.group_tokens)?;
    let dataset = dataset_for(fc)?;
    let student = trainer::load_student::<S>(&a.checkpoint).map_err(from_train_error)?;
    write_run_meta(
        &a.out,
        "infer",
        &a.shared,
        serde_json::json!({"checkpoint": a.checkpoint.display().to_string()}),
    )?;
    let key = StreamKey::root(a.shared.seed).child_str("infer");
    let count = fc.train.probe_test;
    let mut lines = Vec::with_capacity(count);
    let mut reports: Vec<analysis::EntropyReport> = Vec::with_capacity(count);
    for i in 0..count {
        let (img, label) = dataset.probe_item(Split::ProbeTest, i);
        let tape = Tape::<S>::no_grad();
        let out = model::forward(
            &tape,
            &Binding::Frozen(&student),
            &fc.model,
            &img,
            key.child(i as u64),
            a.group_tokens,
            &BarrierTap::None,
        )
        .map_err(|e| from_train_error(TrainError::Model(e)))?;
        let attn: Vec<AttnMatrix> = out
            .assignments
            .iter()
            .map(|m| AttnMatrix::from_tensor(&tape, m))
            .collect();
        reports.push(analysis::grouping_entropy(&attn).map_err(usage)?);
        lines.push(
            serde_json::json!({
                "index": i,
                "label": label,
                "summary": tape.values_f64(&out.summary),
            })
            .to_string(),
        );
    }
    std::fs::write(a.out.join("summaries.ndjson"), lines.join("\n") + "\n").map_err(usage)?;
    let n_layers = fc.model.n_layers_total();
    let mut avg = vec![(0.0, 0.0); n_layers];
    for r in &reports {
        for (l, e) in r.layers.iter().enumerate() {
            avg[l].0 += e.conditional / reports.len() as f64;
            avg[l].1 += e.marginal / reports.len() as f64;
        }
    }
    let entr = serde_json::json!({
        "layers": avg
            .iter()
            .map(|(c, m)| serde_json::json!({"conditional": c, "marginal": m}))
            .collect::<Vec<_>>(),
    });
    std::fs::write(
        a.out.join("entropy_report.json"),
        serde_json::to_vec_pretty(&entr).expect("serializable"),
    )
    .map_err(usage)?;
    println!(
        "wrote {count} summaries and the entropy report to {}",
        a.out.display()
    );
    Ok(())
}

// ── flops / memory ───────────────────────────────────────────────────

fn sweep_list(a: &ReportArgs) -> Result<Vec<Option<usize>>, CliError> {
    check_override(a.group_tokens)?;
    Ok(match (&a.sweep_tokens, a.group_tokens) {
        (Some(list), _) => parse_csv(list)?.into_iter().map(Some).collect(),
        (None, Some(m)) => vec![Some(m)],
        (None, None) => vec![None],
    })
}

fn flops_cmd(a: ReportArgs) -> Result<(), CliError> {
    let fc = setup(&a.shared)?;
    let ms = sweep_list(&a)?;
    let mut rows = Vec::new();
    println!("{:>12}  {:>16}", "group_tokens", "flops");
    for m in &ms {
        let report = cost::count_flops(&fc.model, *m);
        let shown = m.unwrap_or(fc.model.blocks[0].grouping.n_group_tokens);
        println!("{:>12}  {:>16}", shown, report.total_flops);
        rows.push(serde_json::json!({"group_tokens": shown, "report": report}));
    }
    if let Some(out) = &a.out {
        write_run_meta(out, "flops", &a.shared, serde_json::json!({}))?;
        std::fs::write(
            out.join("flops.json"),
            serde_json::to_vec_pretty(&serde_json::json!({ "rows": rows }))
                .expect("serializable"),
        )
        .map_err(usage)?;
    }
    Ok(())
}

fn memory_cmd(a: MemoryArgs) -> Result<(), CliError> {
    let fc = setup(&a.report.shared)?;
    if let Some(b) = &a.baseline {
        if b != "self-attn" {
            return Err(CliError::Usage(format!(
                "unknown baseline '{b}' (supported: self-attn)"
            )));
        }
    }
    let ms = sweep_list(&a.report)?;
    let bytes = fc.train.precision.size_bytes();
    let mut rows = Vec::new();
    println!(
        "{:>12}  {:>16}  {:>16}  {:>10}",
        "group_tokens", "peak_bytes", "attn_bytes", "ratio"
    );
    for m in &ms {
        let shown = m.unwrap_or(fc.model.blocks[0].grouping.n_group_tokens);
        let row = if a.baseline.is_some() {
            let cmp = cost::compare_with_baseline(&fc.model, *m, bytes);
            println!(
                "{:>12}  {:>16}  {:>16}  {:>10.6}",
                shown,
                cmp.grouping.peak_activation_bytes,
                cmp.grouping.attention_memory_bytes,
                cmp.attention_ratio
            );
            serde_json::json!({"group_tokens": shown, "comparison": cmp})
        } else {
            let report = cost::estimate_peak_memory(&fc.model, *m, bytes);
            println!(
                "{:>12}  {:>16}  {:>16}  {:>10}",
                shown, report.peak_activation_bytes, report.attention_memory_bytes, "-"
            );
            serde_json::json!({"group_tokens": shown, "report": report})
        };
        rows.push(row);
    }
    if let Some(out) = &a.report.out {
        write_run_meta(out, "memory", &a.report.shared, serde_json::json!({}))?;
        std::fs::write(
            out.join("memory.json"),
            serde_json::to_vec_pretty(&serde_json::json!({ "rows": rows }))
                .expect("serializable"),
        )
        .map_err(usage)?;
    }
    Ok(())
}

// ── export-attn ──────────────────────────────────────────────────────

fn export_cmd<S: Element>(a: &ExportArgs, fc: &FileConfig) -> Result<(), CliError> {
    check_override(a.group_tokens)?;
    let student = match &a.checkpoint {
        Some(path) => trainer::load_student::<S>(path).map_err(from_train_error)?,
        None => model::init_params::<S>(&fc.model, a.shared.seed).map_err(usage)?,
    };
    let img = match &a.image {
        Some(path) => {
            let raw = read_image(path).map_err(usage)?;
            bilinear_resize(&raw, fc.model.image_size, fc.model.image_size)
        }
        None => dataset_for(fc)?.probe_item(Split::ProbeTest, 0).0,
    };
    write_run_meta(&a.out, "export-attn", &a.shared, serde_json::json!({}))?;
    let tape = Tape::<S>::no_grad();
    let out = model::forward(
        &tape,
        &Binding::Frozen(&student),
        &fc.model,
        &img,
        StreamKey::root(a.shared.seed).child_str("export"),
        a.group_tokens,
        &BarrierTap::None,
    )
    .map_err(|e| from_train_error(TrainError::Model(e)))?;
    let attn: Vec<AttnMatrix> = out
        .assignments
        .iter()
        .map(|m| AttnMatrix::from_tensor(&tape, m))
        .collect();
    let layers: Vec<usize> = match &a.layers {
        Some(list) => parse_csv(list)?,
        None => (0..attn.len()).collect(),
    };
    let max_heads = attn.iter().map(|a| a.heads).max().unwrap_or(1);
    let heads: Vec<usize> = match &a.heads {
        Some(list) => parse_csv(list)?,
        None => (0..max_heads).collect(),
    };
    let grid = fc.model.grid();
    let paths = export_attention_maps(&attn, grid, grid, &layers, &heads, None, &a.out)
        .map_err(usage)?;
    println!(
        "wrote {} attention maps to {}",
        paths.len(),
        a.out.display()
    );
    Ok(())
}
