//! Trains and evaluates every variant over the configured seeds.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::eval::EvalMetrics;
use super::{io_error, HarnessError, StepLog, Workspace};
use crate::metrics::{render_table, MetricReport};
use crate::models::{Task, Teacher, Variant};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub label: String,
    pub seed: u64,
    pub metrics: EvalMetrics,
    /// Parameters needed at inference, including a parameterized generator.
    pub inference_params: usize,
    /// Parameters involved in training, including a frozen teacher.
    pub training_params: usize,
    pub final_loss: Option<f64>,
    pub skipped_infeasible: usize,
    /// `(step, held-out L_context)` for GenerativeAware.
    pub checkpoints: Vec<(usize, f64)>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub label: String,
    pub inference_params: usize,
    pub training_params: usize,
    pub metrics: Vec<MetricReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunRecord>,
    pub rows: Vec<VariantRow>,
    /// Primary metric of GenerativeInjection minus GenerativeAware, per seed.
    pub delta_d_minus_e: Option<MetricReport>,
    pub wall_clock_seconds: f64,
    pub checks: Vec<Check>,
}

/// One pass/fail expectation evaluated on a finished comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: &str, pass: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            pass,
            detail,
        }
    }
}

/// Thresholds of the synthetic ordering experiment.
pub const BASELINE_MIN_ERROR: f64 = 40.0;
pub const INJECTED_MAX_ERROR: f64 = 25.0;
pub const MAX_D_E_GAP: f64 = 2.0;
pub const MIN_COSINE: f64 = 0.9;
/// Checkpoints allowed not to decrease the held-out context loss.
pub const MAX_NON_DECREASES: usize = 1;

/// Number of consecutive checkpoint pairs where the loss did not decrease.
pub fn non_decreases(checkpoints: &[(usize, f64)]) -> usize {
    checkpoints.windows(2).filter(|w| w[1].1 >= w[0].1).count()
}

/// Parameter-count ordering, which holds for any configuration, and for
/// ASR the expected ordering of ambiguous-token error and distillation.
pub fn experiment_checks(report: &ExperimentReport, fusion_plus_student: usize) -> Vec<Check> {
    let mut checks = Vec::new();
    let p = |v: Variant| report.row(v).map_or(0, |r| r.inference_params);
    let (a, c, d, e) = (
        p(Variant::Baseline),
        p(Variant::ContextInjection),
        p(Variant::GenerativeInjection),
        p(Variant::GenerativeAware),
    );
    checks.push(Check::new(
        "inference params: A < E < D, C <= D",
        a < e && e < d && c <= d,
        format!("A {a}, C {c}, D {d}, E {e}"),
    ));
    checks.push(Check::new(
        "inference params: E - A = fusion + student",
        e - a.min(e) == fusion_plus_student,
        format!("E - A = {}, expected {fusion_plus_student}", e as i64 - a as i64),
    ));
    if report.config.train.task != Task::Asr {
        return checks;
    }
    let err = |v: Variant| report.mean(v, "ambiguous_error").unwrap_or(f64::NAN);
    let (ea, ed, ee) = (err(Variant::Baseline), err(Variant::GenerativeInjection), err(Variant::GenerativeAware));
    checks.push(Check::new(
        "baseline ambiguous error >= 40",
        ea >= BASELINE_MIN_ERROR,
        format!("{ea:.2}"),
    ));
    checks.push(Check::new(
        "generative injection ambiguous error <= 25",
        ed <= INJECTED_MAX_ERROR,
        format!("{ed:.2}"),
    ));
    checks.push(Check::new(
        "generative aware ambiguous error <= 25",
        ee <= INJECTED_MAX_ERROR,
        format!("{ee:.2}"),
    ));
    checks.push(Check::new(
        "|D - E| ambiguous error <= 2",
        (ed - ee).abs() <= MAX_D_E_GAP,
        format!("{:.2}", ed - ee),
    ));
    let cos = report.mean(Variant::GenerativeAware, "context_cosine").unwrap_or(f64::NAN);
    checks.push(Check::new("student/teacher cosine > 0.9", cos > MIN_COSINE, format!("{cos:.4}")));
    for r in report.runs_of(Variant::GenerativeAware) {
        let n = non_decreases(&r.checkpoints);
        let losses: Vec<String> = r.checkpoints.iter().map(|(_, l)| format!("{l:.4}")).collect();
        checks.push(Check::new(
            &format!("held-out context loss decreases (seed {})", r.seed),
            r.checkpoints.len() >= 2 && n <= MAX_NON_DECREASES,
            format!("{n} non-decreasing of {}: [{}]", r.checkpoints.len().saturating_sub(1), losses.join(", ")),
        ));
    }
    checks
}

/// Metric that summarizes a task in the comparison.
pub fn primary_metric(task: Task) -> &'static str {
    match task {
        Task::Asr => "ambiguous_error",
        Task::Ner => "ner_f1",
        Task::Sentiment => "macro_f1",
    }
}

pub fn metric_value(m: &EvalMetrics, name: &str) -> Option<f64> {
    match name {
        "wer" => m.wer,
        "ambiguous_error" => m.ambiguous_error,
        "ner_f1" => m.ner_f1,
        "macro_f1" => m.macro_f1,
        "context_cosine" => m.context_cosine,
        "context_l2" => m.context_l2,
        _ => None,
    }
}

const METRICS: [&str; 6] = ["wer", "ambiguous_error", "ner_f1", "macro_f1", "context_cosine", "context_l2"];

impl ExperimentReport {
    pub fn runs_of(&self, variant: Variant) -> impl Iterator<Item = &RunRecord> {
        self.runs.iter().filter(move |r| r.variant == variant)
    }

    pub fn row(&self, variant: Variant) -> Option<&VariantRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Seed mean of a metric for one variant.
    pub fn mean(&self, variant: Variant, metric: &str) -> Option<f64> {
        self.row(variant)?
            .metrics
            .iter()
            .find(|m| m.metric == metric)
            .map(|m| m.mean)
    }

    pub fn to_table(&self) -> String {
        let fmt = |row: &VariantRow, name: &str| {
            row.metrics
                .iter()
                .find(|m| m.metric == name)
                .map_or("-".to_string(), |m| format!("{:.2} ± {:.2}", m.mean, m.std))
        };
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    format!("{} ({})", r.label, variant_name(r.variant)),
                    r.inference_params.to_string(),
                    r.training_params.to_string(),
                    fmt(r, "wer"),
                    fmt(r, "ambiguous_error"),
                    fmt(r, "ner_f1"),
                    fmt(r, "macro_f1"),
                    fmt(r, "context_cosine"),
                ]
            })
            .collect();
        let mut out = render_table(
            &["system", "inference params", "training params", "WER", "ambiguous err", "NER F1", "macro F1", "cosine"],
            &rows,
        );
        for c in &self.checks {
            out.push_str(&format!("{} {}: {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail));
        }
        if let Some(d) = &self.delta_d_minus_e {
            out.push_str(&format!("\nD - E {}: {:.2} ± {:.2}\n", d.metric, d.mean, d.std));
        }
        out.push_str(&format!(
            "seeds {:?}, config {}, {:.1} s\n",
            self.seeds, self.fingerprint, self.wall_clock_seconds
        ));
        out
    }
}

/// Parameters GenerativeAware adds to the baseline: the bias-free fusion
/// projections and the student's linear map.
pub fn fusion_plus_student(m: &crate::models::ModelConfig) -> usize {
    let inner = m.fusion_heads * m.fusion_head_dim;
    let fusion = m.d_model * inner + 2 * m.d_text * inner + inner * m.d_model;
    let student = m.d_model * m.d_text + m.d_text;
    fusion + student
}

pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Baseline => "baseline",
        Variant::ContextInjection => "context injection",
        Variant::GenerativeInjection => "generative injection",
        Variant::GenerativeAware => "generative aware",
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text).map_err(io_error(path))
}

/// Report file stem under the output directory.
pub fn report_stem(out_dir: &Path, fingerprint: &str) -> PathBuf {
    out_dir.join(format!("compare-{fingerprint}"))
}

/// Per seed, trains A, C, D and E in that order (E distils from the D model
/// of the same seed), evaluates each, and aggregates. Runs completed so far
/// are written to `<stem>.partial.json` after every run; the final report
/// goes to `<stem>.json` and `<stem>.txt` when `write` is set.
pub fn compare_variants(
    ws: &mut Workspace,
    write: bool,
    on_step: &mut dyn FnMut(Variant, u64, &StepLog),
) -> Result<ExperimentReport, HarnessError> {
    let start = Instant::now();
    let fingerprint = ws.cfg.fingerprint();
    let out_dir = PathBuf::from(&ws.cfg.paths.out_dir);
    let stem = report_stem(&out_dir, &fingerprint);
    let partial = stem.with_extension("partial.json");
    if write {
        std::fs::create_dir_all(&out_dir).map_err(io_error(&out_dir))?;
    }
    let seeds = ws.cfg.train.seeds.clone();
    let mut runs: Vec<RunRecord> = Vec::new();

    for &seed in &seeds {
        let mut teacher: Option<Teacher> = None;
        for variant in Variant::ALL {
            let t0 = Instant::now();
            let mut log = |s: &StepLog| on_step(variant, seed, s);
            let run = ws.train_variant(variant, seed, teacher.as_ref(), &mut log)?;
            let metrics = ws.evaluate(&run.model, teacher.as_ref())?;
            let mut inference_params = run.model.count_inference_params();
            let mut training_params = run.model.params.num_scalars();
            match variant {
                Variant::GenerativeInjection => {
                    let g = ws.generator()?.parameter_count();
                    inference_params += g;
                    training_params += g;
                }
                Variant::GenerativeAware => {
                    training_params += teacher.as_ref().map_or(0, Teacher::num_params);
                    training_params += ws.generator()?.parameter_count();
                }
                _ => {}
            }
            runs.push(RunRecord {
                variant,
                label: variant.label().to_string(),
                seed,
                metrics,
                inference_params,
                training_params,
                final_loss: run.summary.steps.last().map(|s| s.loss),
                skipped_infeasible: run.summary.skipped_infeasible,
                checkpoints: run.summary.checkpoints.clone(),
                seconds: t0.elapsed().as_secs_f64(),
            });
            if write {
                write_json(&partial, &runs)?;
            }
            if variant == Variant::GenerativeInjection {
                teacher = Some(Teacher::from_model(&run.model)?);
            }
        }
    }

    let task = ws.cfg.train.task;
    let mut rows = Vec::new();
    for variant in Variant::ALL {
        let of: Vec<&RunRecord> = runs.iter().filter(|r| r.variant == variant).collect();
        let mut metrics = Vec::new();
        for name in METRICS {
            let values: Option<Vec<f64>> = of.iter().map(|r| metric_value(&r.metrics, name)).collect();
            if let Some(values) = values.filter(|v| !v.is_empty()) {
                metrics.push(MetricReport::new(name, &ws.eval.split, seeds.clone(), values)?);
            }
        }
        rows.push(VariantRow {
            variant,
            label: variant.label().to_string(),
            inference_params: of[0].inference_params,
            training_params: of[0].training_params,
            metrics,
        });
    }
    let metric = primary_metric(task);
    let deltas: Option<Vec<f64>> = seeds
        .iter()
        .map(|&s| {
            let get = |v: Variant| {
                runs.iter()
                    .find(|r| r.variant == v && r.seed == s)
                    .and_then(|r| metric_value(&r.metrics, metric))
            };
            Some(get(Variant::GenerativeInjection)? - get(Variant::GenerativeAware)?)
        })
        .collect();
    let delta_d_minus_e = match deltas {
        Some(d) => Some(MetricReport::new(metric, &ws.eval.split, seeds.clone(), d)?),
        None => None,
    };

    let mut report = ExperimentReport {
        fingerprint,
        config: ws.cfg.clone(),
        seeds,
        runs,
        rows,
        delta_d_minus_e,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
        checks: Vec::new(),
    };
    report.checks = experiment_checks(&report, fusion_plus_student(&ws.cfg.model));
    if write {
        write_json(&stem.with_extension("json"), &report)?;
        let txt = stem.with_extension("txt");
        std::fs::write(&txt, report.to_table()).map_err(io_error(&txt))?;
        let _ = std::fs::remove_file(&partial);
    }
    Ok(report)
}
