use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::thread;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sure_core::data::export_dataset;
use sure_core::data::generate;
use sure_core::evaluation::write_deferral_csv;
use sure_core::nn::Checkpoint;
use sure_core::pipeline::{
    evaluate, load_bundle, load_config, pretrain_backbone, run_with_backbone, write_evaluation, write_manifest,
    write_records_csv, write_run, Method, RunConfig, RunOutcome, Scenario,
};
use sure_core::verify;

#[derive(Parser)]
#[command(name = "sure", version, about = "Missing-modality reconstruction with propagated uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as CSV files.
    GenData(Common),
    /// Pretrain and freeze the backbone on the full-modality split.
    Pretrain(Common),
    /// Train a method end to end and write run artifacts.
    Train(TrainArgs),
    /// Evaluate a trained run on missing-modality scenarios.
    Eval(EvalArgs),
    /// Train full SURE and every ablation against one pretrained backbone.
    Ablate(TrainArgs),
    /// Write the deferral curve of a trained run.
    Defer(EvalArgs),
    /// Run the analytic self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct Common {
    /// RunConfig JSON; defaults to the built-in classification setup.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    method: Option<String>,
    /// Weight of the uncertainty term in reconstruction training.
    #[arg(long)]
    rec_weight: Option<f64>,
    /// Weight of the uncertainty term in head training.
    #[arg(long)]
    output_weight: Option<f64>,
    /// Comma-separated seeds; each run goes to `<out>/seed_<s>`.
    #[arg(long, conflicts_with = "seed", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Run the seeds concurrently.
    #[arg(long)]
    parallel: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    run: PathBuf,
    /// `mixed`, `full` or `missing=<i,j,...>`; repeatable. Defaults to all.
    #[arg(long)]
    scenario: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve_config(common: &Common) -> anyhow::Result<RunConfig> {
    let config = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let config = match common.seed {
        Some(seed) => config.with_seed(seed),
        None => config,
    };
    config.validate()?;
    Ok(config)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn gen_data(common: &Common) -> anyhow::Result<()> {
    let config = resolve_config(common)?;
    let splits = generate(&config.dataset)?;
    export_dataset(&common.out, &config.dataset, &splits)?;
    println!("dataset written to {}", common.out.display());
    Ok(())
}

fn pretrain(common: &Common) -> anyhow::Result<()> {
    let config = resolve_config(common)?;
    create_dir(&common.out)?;
    let (backbone, log) = pretrain_backbone(&config)?;
    Checkpoint::capture(&backbone).save(&common.out.join("backbone.json"))?;
    let loss = serde_json::to_string_pretty(&log)?;
    fs::write(common.out.join("pretrain_loss.json"), loss)?;
    write_manifest(&common.out, &config.hash(), config.seed, &["backbone.json", "pretrain_loss.json"])?;
    println!("backbone final loss {:.6}", log.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn train_config(args: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut config = resolve_config(&args.common)?;
    if let Some(w) = args.rec_weight {
        config.rec_weight = w;
    }
    if let Some(w) = args.output_weight {
        config.output_weight = w;
    }
    config.validate()?;
    Ok(config)
}

fn seeds_of(args: &TrainArgs, config: &RunConfig) -> Vec<u64> {
    if args.seeds.is_empty() {
        vec![config.seed]
    } else {
        args.seeds.clone()
    }
}

/// Runs `job` for every seed, sequentially or one thread per seed.
fn fan_out<T: Send>(seeds: &[u64], parallel: bool, job: impl Fn(u64) -> anyhow::Result<T> + Sync) -> anyhow::Result<Vec<T>> {
    if parallel && seeds.len() > 1 {
        let job = &job;
        thread::scope(|s| {
            let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || job(seed))).collect();
            handles
                .into_iter()
                .map(|h| h.join().map_err(|_| anyhow::anyhow!("worker thread panicked"))?)
                .collect()
        })
    } else {
        seeds.iter().map(|&seed| job(seed)).collect()
    }
}

fn run_dir(out: &Path, seeds: &[u64], seed: u64) -> PathBuf {
    if seeds.len() > 1 {
        out.join(format!("seed_{seed}"))
    } else {
        out.to_path_buf()
    }
}

fn report(outcome: &RunOutcome) {
    let summary = outcome.summary();
    let head = summary.headline.as_ref();
    let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "{} seed={} accuracy={} mae={} output_corr={} reconstruction_corr={}",
        summary.method,
        summary.seed,
        fmt(head.and_then(|h| h.task.accuracy)),
        fmt(head.and_then(|h| h.task.mae)),
        fmt(head.and_then(|h| h.output_uncertainty_corr)),
        fmt(head.and_then(|h| h.mean_reconstruction_uncertainty_corr)),
    );
}

fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let mut config = train_config(args)?;
    if let Some(tag) = &args.method {
        config = config.with_method(tag.parse()?);
    }
    let seeds = seeds_of(args, &config);
    let outcomes = fan_out(&seeds, args.parallel, |seed| {
        let config = config.with_seed(seed);
        let outcome = run_with_backbone(&config, None)?;
        write_run(&run_dir(&args.common.out, &seeds, seed), &outcome)?;
        Ok(outcome)
    })?;
    outcomes.iter().for_each(report);
    Ok(())
}

fn ablate(args: &TrainArgs) -> anyhow::Result<()> {
    if args.method.is_some() {
        bail!("ablate runs a fixed method set; --method is not accepted");
    }
    let config = train_config(args)?;
    let seeds = seeds_of(args, &config);
    let methods: Vec<Method> = std::iter::once(Method::Sure).chain(Method::ABLATIONS).collect();
    let rows = fan_out(&seeds, args.parallel, |seed| {
        let config = config.with_seed(seed);
        let (backbone, log) = pretrain_backbone(&config)?;
        let dir = run_dir(&args.common.out, &seeds, seed);
        let mut rows = Vec::new();
        for &method in &methods {
            let outcome = run_with_backbone(&config.with_method(method), Some((&backbone, &log)))?;
            write_run(&dir.join(method.tag()), &outcome)?;
            report(&outcome);
            rows.push(outcome.summary());
        }
        Ok(rows)
    })?;
    create_dir(&args.common.out)?;
    let path = args.common.out.join("ablation.csv");
    let mut text = String::from("method,seed,accuracy,macro_f1,mae,output_corr,reconstruction_corr\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in rows.iter().flatten() {
        let h = s.headline.as_ref();
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.method,
            s.seed,
            cell(h.and_then(|h| h.task.accuracy)),
            cell(h.and_then(|h| h.task.macro_f1)),
            cell(h.and_then(|h| h.task.mae)),
            cell(h.and_then(|h| h.output_uncertainty_corr)),
            cell(h.and_then(|h| h.mean_reconstruction_uncertainty_corr)),
        ));
    }
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    write_manifest(&args.common.out, &config.hash(), config.seed, &["ablation.csv"])?;
    Ok(())
}

fn scenarios_of(args: &EvalArgs, modalities: usize) -> anyhow::Result<Vec<Scenario>> {
    if args.scenario.is_empty() {
        return Ok(Scenario::all(modalities));
    }
    args.scenario
        .iter()
        .map(|s| {
            let scenario: Scenario = s.parse()?;
            if let Scenario::Missing(ix) = &scenario {
                if ix.iter().any(|&i| i >= modalities) {
                    bail!("scenario {s:?} names a modality outside 0..{modalities}");
                }
                if ix.len() == modalities {
                    bail!("scenario {s:?} leaves no modality present");
                }
            }
            Ok(scenario)
        })
        .collect()
}

fn load_run(args: &EvalArgs) -> anyhow::Result<(RunConfig, sure_core::pipeline::ModelBundle)> {
    let config = load_config(&args.run.join("config.json"))?;
    let bundle = load_bundle(&args.run, &config)?;
    Ok((config, bundle))
}

fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let (config, bundle) = load_run(args)?;
    let scenarios = scenarios_of(args, config.dataset.modality_count())?;
    let splits = generate(&config.dataset)?;
    let evaluation = evaluate(&bundle, &config, &splits.test, &scenarios)?;
    let out = args.out.clone().unwrap_or_else(|| args.run.join("eval"));
    create_dir(&out)?;
    write_records_csv(&out.join("records.csv"), &evaluation.scenarios, config.dataset.modality_count())?;
    let mut files = vec!["records.csv"];
    files.extend(write_evaluation(&out, &config, &evaluation)?);
    write_manifest(&out, &config.hash(), config.seed, &files)?;
    for s in &evaluation.scenarios {
        let m = &s.metrics;
        println!(
            "{} accuracy={:?} mae={:?} output_corr={:?}",
            m.scenario, m.task.accuracy, m.task.mae, m.output_uncertainty_corr
        );
    }
    Ok(())
}

fn defer(args: &EvalArgs) -> anyhow::Result<()> {
    let (config, bundle) = load_run(args)?;
    let scenarios = if args.scenario.is_empty() {
        vec![Scenario::Mixed]
    } else {
        scenarios_of(args, config.dataset.modality_count())?
    };
    if scenarios != [Scenario::Mixed] {
        bail!("deferral is computed on the mixed scenario only");
    }
    let splits = generate(&config.dataset)?;
    let evaluation = evaluate(&bundle, &config, &splits.test, &scenarios)?;
    let Some(rows) = evaluation.deferral else {
        bail!("method {} on this task yields no total uncertainty to defer on", config.method);
    };
    let out = args.out.clone().unwrap_or_else(|| args.run.join("defer"));
    create_dir(&out)?;
    write_deferral_csv(&out.join("deferral.csv"), &rows)?;
    write_manifest(&out, &config.hash(), config.seed, &["deferral.csv"])?;
    for r in &rows {
        println!(
            "quantile={} deferred={:.4} retained_acc={:?} tdr_recall={:?} fdr_recall={:?}",
            r.quantile, r.deferred_frac, r.retained_acc, r.tdr_recall, r.fdr_recall
        );
    }
    Ok(())
}

fn run_verify(seed: u64) -> anyhow::Result<()> {
    let checks = verify::run_all(seed)?;
    for c in &checks {
        println!(
            "{} {} (worst {:.3e}, tolerance {:.0e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.tolerance
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} self-check(s) failed");
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(c) => gen_data(&c),
        Command::Pretrain(c) => pretrain(&c),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Defer(a) => defer(&a),
        Command::Verify { seed } => run_verify(seed),
    }
}

fn error_kind(err: &anyhow::Error) -> &'static str {
    if let Some(e) = err.downcast_ref::<sure_core::Error>() {
        e.kind()
    } else if err.downcast_ref::<std::io::Error>().is_some() {
        "io"
    } else if err.downcast_ref::<serde_json::Error>().is_some() {
        "json"
    } else {
        "usage"
    }
}

fn fail(kind: &str, message: &str) -> ExitCode {
    let line = serde_json::json!({ "error": kind, "message": message.trim() });
    eprintln!("{line}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            return fail("arguments", first.trim_start_matches("error: "));
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = format!("{e:#}").replace('\n', " ");
            fail(error_kind(&e), &message)
        }
    }
}
