//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;

use genctx::context::{
    ContextGenerator, EchoGenerator, GenerationRequest, OracleGenerator, OverlapRates, PromptId, TextVocab,
};
use genctx::data::{generate_corpus, segment_key, CorpusConfig, Language};
use genctx::harness::compare::{compare_variants, experiment_checks, fusion_plus_student};
use genctx::harness::config::config_from_str;
use genctx::harness::gradsuite::{run_suite, MAX_SYSTEM_PARAMS, STEP, TOLERANCE};
use genctx::harness::{evaluate_system, ContextFeed, EvalRequest, Workspace};
use genctx::losses::{cross_entropy_value, ctc_forward_backward, ContextNorm};
use genctx::metrics::{context_report, macro_f1, ner_pair_f1, rouge1_f, wer};
use genctx::models::{ContextModel, EmbeddingMode, ModelConfig, SystemSpec, Task, Variant};
use genctx::nn::{named_rng, Graph, Tensor};

struct Outcome {
    failed: Vec<String>,
}

impl Outcome {
    fn record(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        println!("{} [{id}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            self.failed.push(format!("{id} {name}"));
        }
    }
}

fn gradient_suite(out: &mut Outcome) {
    let start = Instant::now();
    let entries = run_suite(11).expect("gradient suite runs");
    let secs = start.elapsed().as_secs_f64();
    let worst = entries
        .iter()
        .max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))
        .expect("non-empty suite");
    let failing: Vec<&str> = entries.iter().filter(|e| !e.report.pass).map(|e| e.name.as_str()).collect();
    let system = entries.last().expect("system entry");
    out.record(
        "1",
        "gradient suite",
        failing.is_empty()
            && worst.report.max_rel_err < TOLERANCE
            && system.params <= MAX_SYSTEM_PARAMS
            && secs < 120.0,
        format!(
            "{} checks at h={STEP:e}, worst {} rel err {:.2e}, failing {:?}, system '{}' has {} params, {secs:.1}s",
            entries.len(),
            worst.name,
            worst.report.max_rel_err,
            failing,
            system.name,
            system.params
        ),
    );
}

/// Sums the probability of every frame-level path that collapses to `target`.
fn brute_force_ctc(log_probs: &[Vec<f64>], target: &[usize]) -> f64 {
    let (t, v) = (log_probs.len(), log_probs[0].len());
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % v;
            c /= v;
        }
        let mut collapsed = Vec::new();
        let mut prev = None;
        for &s in &path {
            if Some(s) != prev && s != 0 {
                collapsed.push(s);
            }
            prev = Some(s);
        }
        if collapsed == target {
            total += path.iter().enumerate().map(|(f, &s)| log_probs[f][s]).sum::<f64>().exp();
        }
    }
    total
}

fn ctc_oracle(out: &mut Outcome) {
    let mut rng = named_rng(5, "acceptance-ctc");
    let (mut cases, mut worst, mut mismatches) = (0, 0.0f64, 0);
    while cases < 250 {
        let t = rng.gen_range(1..=6);
        let v = rng.gen_range(2..=4);
        let len = rng.gen_range(0..=3);
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(1..v)).collect();
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| {
                let logits: Vec<f64> = (0..v).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
                logits.iter().map(|x| x - z).collect()
            })
            .collect();
        let prob = brute_force_ctc(&rows, &target);
        let lp = Tensor::from_rows(&rows).unwrap();
        match ctc_forward_backward(&lp, &target, 0) {
            Ok(o) => {
                let d = (o.nll - (-prob.ln())).abs();
                worst = worst.max(d);
                if !(d <= 1e-8) {
                    mismatches += 1;
                }
                cases += 1;
            }
            // too few frames: no path exists
            Err(_) if prob == 0.0 => {}
            Err(_) => mismatches += 1,
        }
    }
    let uniform = Tensor::filled(&[3, 3], (1.0f64 / 3.0).ln());
    let printed = ctc_forward_backward(&uniform, &[1, 2], 0).unwrap().nll;
    let printed_ok = format!("{printed:.4}") == "1.6864" && (printed - (27.0f64 / 5.0).ln()).abs() < 1e-12;
    out.record(
        "2",
        "ctc oracle",
        mismatches == 0 && printed_ok,
        format!("{cases} feasible cases, max |diff| {worst:.2e}, {mismatches} mismatches; uniform 3x3 [1,2] -> {printed:.4}"),
    );
}

fn default_spec(variant: Variant, output_vocab: usize, text_vocab: usize) -> SystemSpec {
    SystemSpec {
        variant,
        mode: EmbeddingMode::Fixed,
        task: Task::Asr,
        model: ModelConfig::default(),
        output_vocab,
        text_vocab: if variant.uses_text_encoder() { text_vocab } else { 0 },
        seed: 1,
    }
}

fn residual_identity(out: &mut Outcome) {
    let mut m = ContextModel::new(default_spec(Variant::ContextInjection, 40, 60)).unwrap();
    let fusion = m.fusion.clone().unwrap();
    fusion.zero_value_projection(&mut m.params);
    let (dm, dt) = (m.spec.model.d_model, m.spec.model.d_text);
    let mut rng = named_rng(9, "acceptance-residual");
    let mut exact = 0;
    for _ in 0..100 {
        let frames = rng.gen_range(1..=12);
        let z = Tensor::new(vec![frames, dm], (0..frames * dm).map(|_| rng.gen_range(-5.0..5.0)).collect()).unwrap();
        let e = Tensor::vector((0..dt).map(|_| rng.gen_range(-5.0..5.0)).collect());
        let mut g = Graph::new(&m.params, false);
        let (zv, ev) = (g.input(z), g.input(e));
        let fused = m.fuse_context(&mut g, zv, ev).unwrap();
        let same = g
            .value(fused)
            .data()
            .iter()
            .zip(g.value(zv).data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        exact += same as usize;
    }
    out.record("3", "residual identity", exact == 100, format!("{exact}/100 pairs bitwise equal"));
}

fn inference_independence(out: &mut Outcome) {
    let cfg = CorpusConfig::default();
    let corpus = generate_corpus(&cfg).unwrap();
    let language = Language::new(&cfg).unwrap();
    let vocab = TextVocab::new(&language.lexicon);
    let m = ContextModel::new(default_spec(Variant::GenerativeAware, language.lexicon.size(), 0)).unwrap();
    let no_text = m.text.is_none() && m.params.num_scalars_with_prefix("text.") == 0;
    let metrics = evaluate_system(
        &m,
        EvalRequest {
            manifest: &corpus.eval,
            language: &language,
            vocab: &vocab,
            feed: ContextFeed::None,
            teacher: None,
            context_norm: ContextNorm::default(),
        },
    );
    let detail = match &metrics {
        Ok(r) => format!(
            "no text encoder: {no_text}, {} segments evaluated, wer {:.2}",
            r.segments,
            r.wer.unwrap_or(f64::NAN)
        ),
        Err(e) => format!("evaluation failed: {e}"),
    };
    let ok = no_text && metrics.as_ref().is_ok_and(|r| r.segments == corpus.eval.segments.len() && r.wer.is_some());
    out.record("4", "inference independence", ok, detail);
}

fn parameter_reduction(out: &mut Outcome) {
    let (ov, tv) = (45, 60);
    let count = |v| ContextModel::new(default_spec(v, ov, tv)).unwrap().count_inference_params();
    let (a, d, e) = (count(Variant::Baseline), count(Variant::GenerativeInjection), count(Variant::GenerativeAware));
    let cfg = ModelConfig::default();
    // student: d_model -> d_text with bias; fusion: q, k, v, o without biases, one head
    let h = cfg.fusion_head_dim;
    let student = cfg.d_model * cfg.d_text + cfg.d_text;
    let fusion = cfg.d_model * h + cfg.d_text * h + cfg.d_text * h + h * cfg.d_model;
    out.record(
        "5",
        "parameter reduction",
        e - a == student + fusion && e - a == fusion_plus_student(&cfg) && e < d,
        format!("A {a}, D {d}, E {e}; E - A = {} (fusion {fusion} + student {student})", e - a),
    );
}

fn ordering_experiment(out: &mut Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let overrides = vec![
        ("paths.data_dir".to_string(), dir.path().join("data").display().to_string()),
        ("paths.out_dir".to_string(), dir.path().join("runs").display().to_string()),
    ];
    let cfg = config_from_str("", &overrides).unwrap();
    let fusion_student = fusion_plus_student(&cfg.model);
    let mut ws = Workspace::new(cfg).unwrap();
    let start = Instant::now();
    let report = compare_variants(&mut ws, false, &mut |_, _, _| {}).unwrap();
    let secs = start.elapsed().as_secs_f64();
    print!("{}", report.to_table());

    let seeds = report.seeds.len();
    let corpus = &report.config.corpus;
    let default_corpus = corpus.topics == 20
        && corpus.train_streams == 50
        && corpus.eval_streams == 10
        && corpus.ambiguity_rate == 0.3;
    let noise_free = report.config.generator.p_noise == 0.0 && report.config.train.prompt == PromptId::P4;
    let checks = experiment_checks(&report, fusion_student);
    let (distill, ordering): (Vec<_>, Vec<_>) = checks
        .iter()
        .filter(|c| !c.name.starts_with("inference params"))
        .partition(|c| c.name.contains("cosine") || c.name.contains("context loss"));

    let failed: Vec<&str> = ordering.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let summary: Vec<String> = ordering.iter().map(|c| format!("{} = {}", c.name, c.detail)).collect();
    out.record(
        "6",
        "ordering experiment",
        failed.is_empty() && seeds == 3 && default_corpus && noise_free && secs <= 1800.0,
        format!("{seeds} seeds, {secs:.0}s; {}; failing {failed:?}", summary.join("; ")),
    );
    let failed: Vec<&str> = distill.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    let summary: Vec<String> = distill.iter().map(|c| format!("{} = {}", c.name, c.detail)).collect();
    out.record(
        "7",
        "distillation convergence",
        failed.is_empty() && distill.len() == 1 + seeds,
        format!("{}; failing {failed:?}", summary.join("; ")),
    );
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn metric_goldens(out: &mut Outcome) {
    let w = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
    let pairs = |xs: &[(&str, &str)]| xs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect::<Vec<_>>();
    let mut results: Vec<(&str, bool)> = Vec::new();

    results.push(("wer identical", wer(&w("a b c d"), &w("a b c d")).unwrap() == 0.0));
    results.push(("wer empty hypothesis", wer(&w("a b c"), &[]).unwrap() == 100.0));
    let v = wer(&w("a b c"), &w("a x c d")).unwrap();
    results.push(("wer substitution + insertion", close(v, 200.0 / 3.0, 1e-12) && format!("{v:.2}") == "66.67"));
    results.push(("wer empty reference errors", wer::<String>(&[], &w("a")).is_err()));

    let john = pairs(&[("john", "PER")]);
    results.push(("ner perfect", ner_pair_f1(&john, &john) == 1.0));
    let pred = pairs(&[("john", "PER"), ("paris", "LOC")]);
    let gold = pairs(&[("john", "PER"), ("london", "LOC")]);
    results.push(("ner half match", close(ner_pair_f1(&pred, &gold), 0.5, 1e-12)));
    results.push(("ner both empty", ner_pair_f1(&[], &[]) == 1.0));

    results.push(("macro f1 all correct", macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap() == 1.0));
    results.push(("macro f1 absent class", close(macro_f1(&[0, 1], &[0, 1], 3).unwrap(), 2.0 / 3.0, 1e-12)));
    // balanced golds, every prediction class 1: P = 1/3, R = 1 for that class
    let golds = [0, 0, 1, 1, 2, 2];
    let class_f1 = 2.0 * (1.0 / 3.0) / (1.0 / 3.0 + 1.0);
    results.push((
        "macro f1 single-class predictions",
        close(macro_f1(&[1; 6], &golds, 3).unwrap(), class_f1 / 3.0, 1e-12),
    ));
    results.push(("macro f1 length mismatch errors", macro_f1(&[0], &[0, 1], 3).is_err()));

    results.push(("rouge identical", rouge1_f("the cat sat", "the cat sat") == 1.0));
    results.push(("rouge disjoint", rouge1_f("a b", "c d") == 0.0));
    let r = rouge1_f("the cat sat", "the cat ran fast");
    results.push(("rouge clipped overlap", close(r, 4.0 / 7.0, 1e-12) && format!("{r:.4}") == "0.5714"));

    let (ce, _) = cross_entropy_value(&Tensor::vector(vec![0.0, 0.0, 0.0]), 1).unwrap();
    results.push(("cross-entropy uniform", close(ce, 3.0f64.ln(), 1e-15)));

    // context report on a small generated corpus
    let cfg = CorpusConfig {
        topics: 6,
        train_streams: 2,
        eval_streams: 6,
        segments_per_stream: 5,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&cfg).unwrap();
    let language = Language::new(&cfg).unwrap();
    let manifest = &corpus.eval;
    let mut identity = BTreeMap::new();
    for group in manifest.streams() {
        for pair in group.windows(2) {
            identity.insert(segment_key(&pair[0].stream, pair[0].index), pair[1].text());
        }
    }
    let rep = context_report(manifest, &[("identity".to_string(), &identity)]).unwrap();
    results.push(("context report identity", rep.rows[1].rouge1 == 1.0));

    let overlap = OverlapRates {
        p1: 0.95,
        p2: 0.5,
        p3: 0.5,
        p4: 0.05,
    };
    let oracle = OracleGenerator::new(language, 3, 0.0, overlap).unwrap();
    let mut by_prompt = Vec::new();
    for prompt in [PromptId::P1, PromptId::P4] {
        let mut map = BTreeMap::new();
        for s in &manifest.segments {
            let key = segment_key(&s.stream, s.index);
            map.insert(key.clone(), oracle.text_for(&key, s.topic, prompt).unwrap());
        }
        by_prompt.push((format!("{prompt}"), map));
    }
    let refs: Vec<(String, &BTreeMap<String, String>)> = by_prompt.iter().map(|(k, m)| (k.clone(), m)).collect();
    let rep = context_report(manifest, &refs).unwrap();
    results.push(("context report orders P1 above P4", rep.rows[1].rouge1 > rep.rows[2].rouge1));

    let failed: Vec<&str> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    out.record(
        "8",
        "metric goldens",
        failed.is_empty(),
        format!("{} examples, failing {failed:?}", results.len()),
    );
}

fn context_equivalence(out: &mut Outcome) {
    // the echo backend really does return the previous transcript verbatim
    let req = GenerationRequest {
        segment: "s/0".into(),
        topic: None,
        prompt: PromptId::P4,
        prev_text: "see the sea".into(),
    };
    let echoed = EchoGenerator.generate(&req).unwrap().text == "see the sea";

    let dir = tempfile::tempdir().unwrap();
    let overrides = vec![
        ("paths.data_dir".to_string(), dir.path().join("data").display().to_string()),
        ("generator.backend".to_string(), "echo".to_string()),
        // bitwise equality either holds from the first step or not at all
        ("train.steps".to_string(), "300".to_string()),
    ];
    let mut ws = Workspace::new(config_from_str("", &overrides).unwrap()).unwrap();
    let seed = 2;
    let c = ws.train_variant(Variant::ContextInjection, seed, None, &mut |_| {}).unwrap();
    let d = ws.train_variant(Variant::GenerativeInjection, seed, None, &mut |_| {}).unwrap();
    let (mc, md) = (ws.evaluate(&c.model, None).unwrap(), ws.evaluate(&d.model, None).unwrap());
    let same_params = c.model.params.iter().zip(d.model.params.iter()).all(|((na, a), (nb, b))| {
        na == nb && a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    let same_log = c.summary == d.summary;
    let same_metrics = serde_json::to_string(&mc).unwrap() == serde_json::to_string(&md).unwrap()
        && mc.ambiguous_error.map(f64::to_bits) == md.ambiguous_error.map(f64::to_bits)
        && mc.wer.map(f64::to_bits) == md.wer.map(f64::to_bits);
    out.record(
        "9",
        "context equivalence",
        echoed && same_params && same_log && same_metrics,
        format!(
            "{} steps; params identical {same_params}, training log identical {same_log}, metrics identical {same_metrics} (ambiguous error {:.2})",
            c.summary.steps.len(),
            mc.ambiguous_error.unwrap_or(f64::NAN)
        ),
    );
}

fn main() {
    let mut out = Outcome { failed: Vec::new() };
    gradient_suite(&mut out);
    ctc_oracle(&mut out);
    residual_identity(&mut out);
    inference_independence(&mut out);
    parameter_reduction(&mut out);
    ordering_experiment(&mut out);
    metric_goldens(&mut out);
    context_equivalence(&mut out);
    if out.failed.is_empty() {
        println!("acceptance: all criteria pass");
    } else {
        println!("acceptance: {} failing: {:?}", out.failed.len(), out.failed);
        std::process::exit(1);
    }
}
