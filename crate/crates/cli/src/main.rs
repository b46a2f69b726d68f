//! `mmsurv` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mmsurv::cohort::{
    generate_synthetic, load_cohort, load_schema, save_cohort, save_schema, Cohort,
    MissingMechanism, MissingnessScenario, ModalityId, ModalitySchema, SynthConfig, NUM_MODALITIES,
};
use mmsurv::fusion::{model_footprint, FusionConfig, FusionModel, FusionStrategy};
use mmsurv::gradcheck::{run_suite, GradCheckOptions};
use mmsurv::pipeline::{
    ablation_cells, evaluate, run_ablation_grid, shared_validation, train_end_to_end,
    train_fusion_split, train_stage1_split, EndToEndInit, ExperimentCell, GridOptions,
    MultimodalModel, PipelineConfig, Regime,
};
use mmsurv::unimodal::{export_cohort_embeddings, EncoderSet};
use mmsurv::{Error, TrainTrace};

#[derive(Parser, Debug)]
#[command(
    name = "mmsurv",
    version,
    about = "Multi-modal survival prediction with missing modalities"
)]
struct Cli {
    /// Suppress progress output on stdout.
    #[arg(long, global = true)]
    quiet: bool,

    /// Worker threads for the ablation grid.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort with known ground-truth risk.
    Synth(SynthArgs),
    /// Train one encoder per modality (stage 1).
    TrainUni(TrainUniArgs),
    /// Train a fusion model (stage 2, or end to end).
    TrainFuse(TrainFuseArgs),
    /// Evaluate a trained model on a test cohort under a missingness scenario.
    Eval(EvalArgs),
    /// Run the ablation grid and write report.csv, report.json and report.md.
    Ablate(AblateArgs),
    /// Check every analytic gradient against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Print parameter counts of the three fusion strategies.
    Footprint(FootprintArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Cohort CSV file.
    #[arg(long)]
    data: PathBuf,
    /// Schema JSON file; defaults to schema.json next to the data file.
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mechanism {
    Mcar,
    Mnar,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    seed: u64,
    /// Records in the (training) cohort.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Also write a test cohort of this size, drawn from an independent seed.
    #[arg(long)]
    test_n: Option<usize>,
    /// Per-modality missing rate: one value or four comma-separated values.
    #[arg(long, default_value = "0.3", value_delimiter = ',')]
    missing_rate: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    censor_rate: f64,
    #[arg(long, value_enum, default_value_t = Mechanism::Mcar)]
    mechanism: Mechanism,
    /// Per-modality observation noise: one value or four comma-separated values.
    #[arg(long, default_value = "1.0", value_delimiter = ',')]
    noise: Vec<f64>,
    /// Seed of the generative maps shared by every cohort of one synthetic world.
    #[arg(long, default_value_t = 2022)]
    world_seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, default_value_t = 100)]
    stage1_epochs: usize,
    #[arg(long, default_value_t = 64)]
    stage1_batch: usize,
    #[arg(long, default_value_t = 0.002)]
    stage1_lr: f64,
    /// 0 disables early stopping.
    #[arg(long, default_value_t = 10)]
    stage1_patience: usize,
    #[arg(long, default_value_t = 50)]
    fusion_epochs: usize,
    #[arg(long, default_value_t = 8)]
    fusion_batch: usize,
    #[arg(long, default_value_t = 0.0005)]
    fusion_lr: f64,
    /// 0 disables early stopping.
    #[arg(long, default_value_t = 0)]
    fusion_patience: usize,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout_rate: f64,
    /// Weight of the reconstruction loss.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Test-set resamples for the c-index spread; 0 disables.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
}

impl TrainArgs {
    fn pipeline(&self, seed: u64) -> PipelineConfig {
        let mut cfg = PipelineConfig::new(seed);
        cfg.stage1.epochs = self.stage1_epochs;
        cfg.stage1.batch_size = self.stage1_batch;
        cfg.stage1.learning_rate = self.stage1_lr;
        cfg.stage1.patience = self.stage1_patience;
        cfg.stage1.validation_fraction = self.validation_fraction;
        cfg.fusion.epochs = self.fusion_epochs;
        cfg.fusion.batch_size = self.fusion_batch;
        cfg.fusion.learning_rate = self.fusion_lr;
        cfg.fusion.patience = self.fusion_patience;
        cfg.fusion.validation_fraction = self.validation_fraction;
        cfg.dropout_rate = self.dropout_rate;
        cfg.lambda = self.lambda;
        cfg.bootstrap = self.bootstrap;
        cfg
    }
}

#[derive(Args, Debug)]
struct TrainUniArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: u64,
    /// Records stage 1 trains on: C (complete only) or C+M (all).
    #[arg(long, default_value = "C+M")]
    regime: Regime,
    #[command(flatten)]
    train: TrainArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    /// Frozen stage-1 encoders, then fusion.
    TwoStage,
    /// Encoders and fusion trained jointly from random initialisation.
    EndToEnd,
    /// Joint training starting from the stage-1 encoders.
    Finetune,
}

#[derive(Args, Debug)]
struct TrainFuseArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    seed: u64,
    /// Stage-1 encoder checkpoint; stage 1 is trained first when absent.
    #[arg(long)]
    encoders: Option<PathBuf>,
    /// The data already holds per-modality embeddings; skip stage 1.
    #[arg(long, conflicts_with = "encoders")]
    embeddings: bool,
    /// concat, mean or tensor.
    #[arg(long, default_value = "mean")]
    strategy: FusionStrategy,
    #[arg(long, default_value = "C+M")]
    stage1_regime: Regime,
    #[arg(long, default_value = "C+M")]
    stage2_regime: Regime,
    #[arg(long)]
    no_dropout: bool,
    #[arg(long)]
    no_recon: bool,
    #[arg(long, value_enum, default_value_t = Mode::TwoStage)]
    mode: Mode,
    #[command(flatten)]
    train: TrainArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Model checkpoint written by train-fuse.
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// complete, pathology-missing, gene-pathology-missing or drop:<m>+<m>.
    #[arg(long, default_value = "complete")]
    scenario: String,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    /// Bootstrap resampling seed.
    #[arg(long)]
    seed: u64,
    /// JSON result file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// Every row of the ablation table.
    Full,
    /// Only the C+M / C+M mean-vector cell with dropout and reconstruction.
    Mmd,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// Schema JSON file; defaults to schema.json next to the training file.
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Preset::Full)]
    preset: Preset,
    /// Keep only these strategies (repeatable).
    #[arg(long = "strategy")]
    strategies: Vec<FusionStrategy>,
    /// Test scenarios (repeatable); defaults to the three standard ones.
    #[arg(long = "scenario")]
    scenarios: Vec<String>,
    #[command(flatten)]
    train_args: TrainArgs,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long)]
    seed: u64,
    /// Randomized instances per check.
    #[arg(long, default_value_t = 50)]
    instances: usize,
}

#[derive(Args, Debug)]
struct FootprintArgs {
    #[arg(long, default_value_t = 32)]
    embedding_dim: usize,
    /// Include the reconstruction head.
    #[arg(long)]
    recon: bool,
}

/// Failure of a subcommand, carrying its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 1,
            Error::Numerical(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure {
            code: 2,
            msg: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

struct Ui {
    quiet: bool,
}

impl Ui {
    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn config(&self, value: &serde_json::Value) -> CmdResult {
        println!(
            "resolved configuration:\n{}",
            serde_json::to_string_pretty(value)?
        );
        Ok(())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "error"
    } else {
        "warn"
    }))
    .init();

    let ui = Ui { quiet: cli.quiet };
    let result = match &cli.command {
        Command::Synth(a) => synth(a, &ui),
        Command::TrainUni(a) => train_uni(a, &ui),
        Command::TrainFuse(a) => train_fuse(a, &ui),
        Command::Eval(a) => eval(a, &ui),
        Command::Ablate(a) => ablate(a, cli.workers, &ui),
        Command::Gradcheck(a) => gradcheck(a, &ui),
        Command::Footprint(a) => footprint(a, &ui),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn per_modality(values: &[f64], flag: &str) -> Result<[f64; NUM_MODALITIES], Failure> {
    match values {
        [v] => Ok([*v; NUM_MODALITIES]),
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        _ => Err(Failure {
            code: 1,
            msg: format!("--{flag} takes one value or four comma-separated values"),
        }),
    }
}

fn create_dir(dir: &Path) -> CmdResult {
    fs::create_dir_all(dir).map_err(|e| Failure {
        code: 2,
        msg: format!("cannot create {}: {e}", dir.display()),
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure {
        code: 2,
        msg: format!("cannot write {}: {e}", path.display()),
    })
}

fn schema_path(explicit: &Option<PathBuf>, data: &Path) -> PathBuf {
    explicit
        .clone()
        .unwrap_or_else(|| data.with_file_name("schema.json"))
}

fn load(data: &Path, schema: &Option<PathBuf>) -> Result<Cohort, Failure> {
    let schema = load_schema(&schema_path(schema, data))?;
    Ok(load_cohort(data, &schema)?)
}

fn synth(a: &SynthArgs, ui: &Ui) -> CmdResult {
    let cfg = SynthConfig {
        n: a.n,
        missing_rate: per_modality(&a.missing_rate, "missing-rate")?,
        censor_rate: a.censor_rate,
        mechanism: match a.mechanism {
            Mechanism::Mcar => MissingMechanism::Mcar,
            Mechanism::Mnar => MissingMechanism::Mnar,
        },
        noise: per_modality(&a.noise, "noise")?,
        world_seed: a.world_seed,
        ..Default::default()
    };
    let test_seed = a.seed.wrapping_add(1);
    ui.config(&json!({
        "command": "synth",
        "seed": a.seed,
        "test_n": a.test_n,
        "test_seed": a.test_n.map(|_| test_seed),
        "synth": cfg,
        "out": a.out,
    }))?;
    let schema = ModalitySchema::synthetic_default();
    create_dir(&a.out)?;
    let main = generate_synthetic(&cfg, &schema, a.seed)?;
    save_schema(&schema, &a.out.join("schema.json"))?;
    match a.test_n {
        None => {
            save_cohort(&main, &a.out.join("cohort.csv"))?;
            ui.progress(format!(
                "wrote {} records to {}",
                main.len(),
                a.out.join("cohort.csv").display()
            ));
        }
        Some(n) => {
            let test = generate_synthetic(&SynthConfig { n, ..cfg }, &schema, test_seed)?;
            save_cohort(&main, &a.out.join("train.csv"))?;
            save_cohort(&test, &a.out.join("test.csv"))?;
            ui.progress(format!(
                "wrote {} training and {} test records to {}",
                main.len(),
                test.len(),
                a.out.display()
            ));
        }
    }
    Ok(())
}

fn train_uni(a: &TrainUniArgs, ui: &Ui) -> CmdResult {
    let cfg = a.train.pipeline(a.seed);
    ui.config(&json!({
        "command": "train-uni",
        "data": a.data.data,
        "schema": schema_path(&a.data.schema, &a.data.data),
        "seed": a.seed,
        "regime": a.regime,
        "stage1": cfg.stage1,
        "out": a.out,
    }))?;
    cfg.validate()?;
    let cohort = load(&a.data.data, &a.data.schema)?;
    create_dir(&a.out)?;
    let validation = shared_validation(cohort.len(), &cfg);
    let (encoders, traces) = train_stage1_split(&cohort, a.regime, &cfg.stage1, &validation)?;
    for (m, t) in ModalityId::ALL.iter().zip(&traces) {
        ui.progress(format!("{m}: {}", summarize(t)));
    }
    encoders.save(&a.out.join("encoders.json"))?;
    let traces: serde_json::Map<String, serde_json::Value> = ModalityId::ALL
        .iter()
        .zip(&traces)
        .map(|(m, t)| Ok((m.name().to_string(), serde_json::to_value(t)?)))
        .collect::<Result<_, serde_json::Error>>()?;
    write_json(&a.out.join("trace.json"), &traces)?;
    let table = export_cohort_embeddings(&encoders, &cohort)?;
    table.save(
        &a.out.join("embeddings.csv"),
        &a.out.join("embeddings.schema.json"),
    )?;
    ui.progress(format!(
        "wrote encoders, traces and embeddings to {}",
        a.out.display()
    ));
    Ok(())
}

fn summarize(t: &TrainTrace) -> String {
    let best = t.val_cindex.get(t.best_epoch).copied().flatten();
    format!(
        "{} epochs, kept epoch {}, validation c-index {}",
        t.epoch_loss.len(),
        t.best_epoch + 1,
        best.map_or("n/a".into(), |c| format!("{c:.4}"))
    )
}

fn train_fuse(a: &TrainFuseArgs, ui: &Ui) -> CmdResult {
    let cfg = a.train.pipeline(a.seed);
    let cell = ExperimentCell::new(
        a.strategy,
        a.stage1_regime,
        a.stage2_regime,
        !a.no_dropout,
        !a.no_recon,
    );
    let cohort = load(&a.data.data, &a.data.schema)?;
    ui.config(&json!({
        "command": "train-fuse",
        "data": a.data.data,
        "schema": schema_path(&a.data.schema, &a.data.data),
        "seed": a.seed,
        "mode": a.mode.to_possible_value().map(|v| v.get_name().to_string()),
        "encoders": a.encoders,
        "embeddings": a.embeddings,
        "cell": cell,
        "fusion": cfg.fusion_config(&cell, cohort.schema().embedding_dim()),
        "pipeline": cfg,
        "out": a.out,
    }))?;
    cfg.validate()?;
    create_dir(&a.out)?;
    let validation = shared_validation(cohort.len(), &cfg);

    let (model, trace) = match a.mode {
        Mode::TwoStage => {
            let encoders = if a.embeddings {
                EncoderSet::passthrough(cohort.schema().embedding_dim())
            } else if let Some(p) = &a.encoders {
                EncoderSet::load(p)?
            } else {
                ui.progress("training stage-1 encoders");
                train_stage1_split(&cohort, cell.stage1, &cfg.stage1, &validation)?.0
            };
            let table = export_cohort_embeddings(&encoders, &cohort)?;
            let (fusion, trace) = train_fusion_split(&table, &cell, &cfg, &validation)?;
            (MultimodalModel { encoders, fusion }, trace)
        }
        Mode::EndToEnd | Mode::Finetune => {
            if a.embeddings {
                return Err(Failure {
                    code: 1,
                    msg: "end-to-end training needs raw features, not embeddings".into(),
                });
            }
            let init = match (a.mode, &a.encoders) {
                (Mode::EndToEnd, _) => EndToEndInit::Scratch,
                (_, Some(p)) => EndToEndInit::FinetuneCheckpoint(p.clone()),
                (_, None) => {
                    ui.progress("training stage-1 encoders");
                    EndToEndInit::Finetune(
                        train_stage1_split(&cohort, cell.stage1, &cfg.stage1, &validation)?.0,
                    )
                }
            };
            train_end_to_end(&cohort, &cell, &cfg, init)?
        }
    };
    ui.progress(format!("fusion: {}", summarize(&trace)));
    model.save(&a.out.join("model.json"))?;
    write_json(&a.out.join("trace.json"), &trace)?;
    ui.progress(format!("wrote model and trace to {}", a.out.display()));
    Ok(())
}

fn eval(a: &EvalArgs, ui: &Ui) -> CmdResult {
    let scenario = MissingnessScenario::parse(&a.scenario)?;
    ui.config(&json!({
        "command": "eval",
        "model": a.model,
        "data": a.data.data,
        "schema": schema_path(&a.data.schema, &a.data.data),
        "scenario": scenario.name(),
        "bootstrap": a.bootstrap,
        "seed": a.seed,
        "out": a.out,
    }))?;
    let model = MultimodalModel::load(&a.model)?;
    let cohort = load(&a.data.data, &a.data.schema)?;
    let e = evaluate(&model, &cohort, &scenario, a.bootstrap, a.seed)?;
    let spread = e
        .std
        .map_or(String::new(), |s| format!(" ± {s:.4} (bootstrap)"));
    println!(
        "{}: c-index {:.4}{spread}, n = {}",
        e.scenario, e.cindex, e.n_test
    );
    if e.dropped > 0 {
        println!(
            "{} records had no modality left and were excluded",
            e.dropped
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &e)?;
    }
    Ok(())
}

fn ablate(a: &AblateArgs, workers: usize, ui: &Ui) -> CmdResult {
    let mut cells = match a.preset {
        Preset::Full => ablation_cells(),
        Preset::Mmd => vec![ExperimentCell::mmd()],
    };
    if !a.strategies.is_empty() {
        cells.retain(|c| a.strategies.contains(&c.strategy));
    }
    let scenarios = if a.scenarios.is_empty() {
        MissingnessScenario::standard()
    } else {
        a.scenarios
            .iter()
            .map(|s| MissingnessScenario::parse(s))
            .collect::<Result<Vec<_>, _>>()?
    };
    let mut options = GridOptions::new(a.train_args.pipeline(a.seed));
    options.scenarios = scenarios;
    options.workers = workers;
    ui.config(&json!({
        "command": "ablate",
        "train": a.train,
        "test": a.test,
        "schema": schema_path(&a.schema, &a.train),
        "seed": a.seed,
        "cells": cells.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "options": options,
        "out": a.out,
    }))?;
    let schema = load_schema(&schema_path(&a.schema, &a.train))?;
    let train = load_cohort(&a.train, &schema)?;
    let test = load_cohort(&a.test, &schema)?;
    ui.progress(format!(
        "training {} cells on {} records, testing on {}",
        cells.len(),
        train.len(),
        test.len()
    ));
    let report = run_ablation_grid(&train, &test, &cells, &options)?;
    report.write_all(&a.out)?;
    ui.progress(format!(
        "wrote report.csv, report.json and report.md to {} ({} failed rows)",
        a.out.display(),
        report.failures()
    ));
    Ok(())
}

fn gradcheck(a: &GradcheckArgs, ui: &Ui) -> CmdResult {
    let opts = GradCheckOptions {
        instances: a.instances,
        seed: a.seed,
        ..Default::default()
    };
    ui.config(&json!({
        "command": "gradcheck",
        "h": opts.h,
        "tolerance": opts.tolerance,
        "floor": opts.floor,
        "instances": opts.instances,
        "max_coords": opts.max_coords,
        "max_skip_fraction": opts.max_skip_fraction,
        "seed": opts.seed,
    }))?;
    let reports = run_suite(&opts)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        failed += usize::from(!r.passed());
        println!(
            "{verdict:<4} {:<45} instances={:>3} coords={:>6} skipped={:>3} max_rel={:.2e}",
            r.name, r.instances, r.coords, r.skipped, r.max_rel_error
        );
    }
    if failed > 0 {
        return Err(Failure {
            code: 3,
            msg: format!("{failed} gradient checks failed"),
        });
    }
    ui.progress(format!("all {} gradient checks passed", reports.len()));
    Ok(())
}

fn footprint(a: &FootprintArgs, ui: &Ui) -> CmdResult {
    ui.config(&json!({
        "command": "footprint",
        "embedding_dim": a.embedding_dim,
        "recon": a.recon,
    }))?;
    for &s in &FusionStrategy::ALL {
        let cfg = FusionConfig::new(s)
            .with_embedding_dim(a.embedding_dim)
            .with_reconstruction(a.recon);
        let fp = model_footprint(&FusionModel::new(cfg.clone(), 0)?);
        println!("{} (fused dim {})", s.name(), cfg.fused_dim());
        for (part, n) in &fp.parts {
            println!("  {part:<24} {n:>10}");
        }
        println!("  {:<24} {:>10}  ({} bytes)", "total", fp.total, fp.bytes);
    }
    Ok(())
}
