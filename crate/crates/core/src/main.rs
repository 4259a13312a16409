use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use genctx::context::PromptId;
use genctx::data::{context_free_ambiguous_accuracy, generate_corpus, write_manifest};
use genctx::harness::compare::{compare_variants, report_stem, ExperimentReport};
use genctx::harness::config::{load_config, parse_overrides, ExperimentConfig};
use genctx::harness::gradsuite::{run_suite, MAX_SYSTEM_PARAMS};
use genctx::harness::train::ContextSource;
use genctx::harness::{
    io_error, manifest_path, HarnessError, Split, StepLog, Workspace, EXIT_CONFIG, EXIT_OK,
};
use genctx::metrics::context_report;
use genctx::models::{ContextModel, Teacher, Variant};

#[derive(Parser)]
#[command(name = "genctx", version, about = "Context-conditioned speech models on synthetic streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write both split manifests.
    GenData(Common),
    /// Generate context text for every prompt and report its overlap with the next segment.
    GenContext(Common),
    /// Train `train.variant` for every seed.
    Train(Common),
    /// Evaluate the checkpoint at `paths.checkpoint` on the eval split.
    Eval(Common),
    /// Train and evaluate all four variants and check the expected ordering.
    Compare(Common),
    /// Run the finite-difference gradient suite.
    GradCheck(Common),
    /// Print a saved comparison report for the current configuration.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides as `--dotted.key value` or `--key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (Command::GenData(c)
    | Command::GenContext(c)
    | Command::Train(c)
    | Command::Eval(c)
    | Command::Compare(c)
    | Command::GradCheck(c)
    | Command::Report(c)) = &cli.command;
    let cfg = match resolve(c) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    let result = match cli.command {
        Command::GenData(_) => gen_data(&cfg),
        Command::GenContext(_) => gen_context(cfg),
        Command::Train(_) => train(cfg),
        Command::Eval(_) => eval(cfg),
        Command::Compare(_) => compare(cfg),
        Command::GradCheck(_) => grad_check(&cfg),
        Command::Report(_) => report(&cfg),
    };
    match result {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// `--config` may also appear among the trailing overrides.
fn resolve(c: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut path = c.config.clone();
    let mut pairs = parse_overrides(&c.overrides)?;
    if let Some(pos) = pairs.iter().position(|(k, _)| k == "config") {
        path = Some(PathBuf::from(pairs.remove(pos).1));
    }
    Ok(load_config(path.as_deref(), &pairs)?)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, HarnessError> {
    let dir = PathBuf::from(&cfg.paths.out_dir);
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    Ok(dir)
}

fn gen_data(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let corpus = generate_corpus(&cfg.corpus)?;
    let dir = PathBuf::from(&cfg.paths.data_dir);
    fs::create_dir_all(&dir).map_err(io_error(&dir))?;
    for m in [&corpus.train, &corpus.eval] {
        let path = manifest_path(&dir, &m.split);
        write_manifest(m, &path)?;
        println!(
            "{}: {} streams, {} segments -> {}",
            m.split,
            m.stream_ids().len(),
            m.segments.len(),
            path.display()
        );
    }
    println!(
        "lexicon {} labels, {} codewords; context-free ambiguous accuracy on eval {:.3}",
        corpus.language.lexicon.size(),
        corpus.language.lexicon.num_codewords(),
        context_free_ambiguous_accuracy(&corpus.language, &corpus.eval)
    );
    Ok(())
}

fn gen_context(mut cfg: ExperimentConfig) -> Result<(), HarnessError> {
    if cfg.paths.cache.is_empty() {
        cfg.paths.cache = Path::new(&cfg.paths.data_dir).join("contexts.jsonl").display().to_string();
        fs::create_dir_all(&cfg.paths.data_dir).map_err(io_error(Path::new(&cfg.paths.data_dir)))?;
    }
    let fp = cfg.fingerprint();
    let dir = out_dir(&cfg)?;
    let mut ws = Workspace::new(cfg)?;
    ws.generator()?;
    let mut maps = Vec::new();
    for prompt in [PromptId::P1, PromptId::P2, PromptId::P3, PromptId::P4] {
        ws.context_texts_with(Split::Train, ContextSource::Generated, prompt)?;
        let texts = ws.context_texts_with(Split::Eval, ContextSource::Generated, prompt)?;
        // texts are indexed by the segment they condition; key them by their source
        let map = ws
            .eval
            .segments
            .iter()
            .zip(&texts)
            .filter_map(|(s, t)| Some((genctx::data::segment_key(&s.stream, s.index.checked_sub(1)?), t.clone()?)))
            .collect::<std::collections::BTreeMap<_, _>>();
        maps.push((format!("generated {prompt}"), map));
    }
    let refs: Vec<(String, &std::collections::BTreeMap<String, String>)> =
        maps.iter().map(|(n, m)| (n.clone(), m)).collect();
    let table = context_report(&ws.eval, &refs)?.to_table();
    print!("{table}");
    println!("cache: {} entries ({} generated now) in {}", ws.cache.len(), ws.cache.misses(), ws.cfg.paths.cache);
    let path = dir.join(format!("context-{fp}.txt"));
    fs::write(&path, table).map_err(io_error(&path))?;
    Ok(())
}

fn progress(label: &str, seed: u64, steps: usize) -> impl FnMut(&StepLog) + '_ {
    let every = (steps / 10).max(1);
    move |s: &StepLog| {
        if s.step % every == 0 || s.step == steps {
            eprintln!(
                "[{label} seed {seed}] step {}/{steps} loss {:.4} task {:.4}{}",
                s.step,
                s.loss,
                s.task,
                s.context.map_or(String::new(), |c| format!(" context {c:.4}"))
            );
        }
    }
}

fn load_teacher(path: &str) -> Result<Teacher, HarnessError> {
    let model = ContextModel::load(Path::new(path))?;
    Ok(Teacher::from_model(&model)?)
}

fn train(cfg: ExperimentConfig) -> Result<(), HarnessError> {
    let fp = cfg.fingerprint();
    let dir = out_dir(&cfg)?;
    let variant = cfg.train.variant;
    let steps = cfg.train.steps;
    let mut ws = Workspace::new(cfg)?;
    for seed in ws.cfg.train.seeds.clone() {
        let teacher = match variant {
            Variant::GenerativeAware if !ws.cfg.paths.teacher.is_empty() => Some(load_teacher(&ws.cfg.paths.teacher)?),
            Variant::GenerativeAware => {
                let mut log = progress("D (teacher)", seed, steps);
                let run = ws.train_variant(Variant::GenerativeInjection, seed, None, &mut log)?;
                Some(Teacher::from_model(&run.model)?)
            }
            _ => None,
        };
        let log_path = dir.join(format!("train-{}-seed{seed}-{fp}.jsonl", variant.label()));
        let mut log_file = BufWriter::new(File::create(&log_path).map_err(io_error(&log_path))?);
        let mut show = progress(variant.label(), seed, steps);
        let mut write_err = None;
        let mut on_step = |s: &StepLog| {
            show(s);
            let line = serde_json::json!({
                "step": s.step, "loss": s.loss, "task": s.task, "context": s.context, "grad_norm": s.grad_norm,
            });
            if let Err(e) = writeln!(log_file, "{line}") {
                write_err.get_or_insert(e);
            }
        };
        let run = ws.train_variant(variant, seed, teacher.as_ref(), &mut on_step)?;
        if let Some(e) = write_err {
            return Err(io_error(&log_path)(e));
        }
        log_file.flush().map_err(io_error(&log_path))?;
        let ckpt = dir.join(format!("{}-seed{seed}-{fp}.ckpt", variant.label()));
        run.model.save(&ckpt)?;
        let metrics = ws.evaluate(&run.model, teacher.as_ref())?;
        println!(
            "{}",
            serde_json::json!({
                "variant": variant, "seed": seed, "checkpoint": ckpt.display().to_string(),
                "skipped_infeasible": run.summary.skipped_infeasible,
                "checkpoints": run.summary.checkpoints, "metrics": metrics,
            })
        );
    }
    Ok(())
}

fn eval(cfg: ExperimentConfig) -> Result<(), HarnessError> {
    if cfg.paths.checkpoint.is_empty() {
        return Err(genctx::harness::ConfigError::Invalid("eval needs paths.checkpoint".into()).into());
    }
    let fp = cfg.fingerprint();
    let dir = out_dir(&cfg)?;
    let model = ContextModel::load(Path::new(&cfg.paths.checkpoint))?;
    let teacher = match cfg.paths.teacher.as_str() {
        "" => None,
        p => Some(load_teacher(p)?),
    };
    let mut ws = Workspace::new(cfg)?;
    let metrics = ws.evaluate(&model, teacher.as_ref())?;
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "variant": model.variant(),
        "checkpoint": ws.cfg.paths.checkpoint,
        "inference_params": model.count_inference_params(),
        "metrics": metrics,
        "config": ws.cfg,
    }))
    .expect("serializes");
    println!("{text}");
    let path = dir.join(format!("eval-{}-{fp}.json", model.variant().label()));
    fs::write(&path, text).map_err(io_error(&path))?;
    Ok(())
}

fn finish_checks(report: &ExperimentReport) -> Result<(), HarnessError> {
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Acceptance(failed.join("; ")))
    }
}

fn compare(cfg: ExperimentConfig) -> Result<(), HarnessError> {
    out_dir(&cfg)?;
    let steps = cfg.train.steps;
    let every = (steps / 5).max(1);
    let start = Instant::now();
    let mut ws = Workspace::new(cfg)?;
    let report = compare_variants(&mut ws, true, &mut |v: Variant, seed, s: &StepLog| {
        if s.step % every == 0 {
            eprintln!(
                "[{:>5.0}s] {} seed {seed} step {}/{steps} loss {:.4}",
                start.elapsed().as_secs_f64(),
                v.label(),
                s.step,
                s.loss
            );
        }
    })?;
    print!("{}", report.to_table());
    finish_checks(&report)
}

fn grad_check(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let start = Instant::now();
    let entries = run_suite(cfg.train.seeds[0])?;
    let mut failed = Vec::new();
    for e in &entries {
        let ok = e.report.pass && (e.name != "generative_aware_system" || e.params <= MAX_SYSTEM_PARAMS);
        println!(
            "{} {:<24} coords {:>6} max rel err {:.3e} at {}",
            if ok { "PASS" } else { "FAIL" },
            e.name,
            e.report.checked,
            e.report.max_rel_err,
            e.report.worst.as_deref().unwrap_or("-")
        );
        if !ok {
            failed.push(e.name.clone());
        }
    }
    println!("{} checks in {:.1} s", entries.len(), start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(HarnessError::Acceptance(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn report(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let path = report_stem(Path::new(&cfg.paths.out_dir), &cfg.fingerprint()).with_extension("json");
    let text = fs::read_to_string(&path).map_err(io_error(&path))?;
    let report: ExperimentReport = serde_json::from_str(&text)
        .map_err(|e| HarnessError::Mismatch(format!("{}: {e}", path.display())))?;
    print!("{}", report.to_table());
    finish_checks(&report)
}
