use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use fmtembed::autodiff::gradcheck::{self, FD_STEP, FD_TOLERANCE};
use fmtembed::embeddings::{embed_documents, ensemble_embeddings, EmbeddingSet};
use fmtembed::encoder::{load_checkpoint, save_checkpoint, EncoderModel};
use fmtembed::io::{
    cross_table, load_benchmark, load_dataset, load_embeddings, report_csv, report_table, save_embeddings, write_dataset,
    write_json, write_jsonl, IoError, RunManifest, DOCUMENTS_FILE, QUERIES_FILE, TASKS_FILE,
};
use fmtembed::objectives::loss_cases;
use fmtembed::synth::{cross_format_matrix, prepare, pretrain_base, run_benchmark, train_variant, BenchmarkReport, CrossMatrix};
use fmtembed::types::ControlCode;
use log::{info, warn};
use serde::Serialize;

use crate::artifacts::Outputs;
use crate::config::RunConfig;

/// Gradient checks that exceeded the tolerance.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericFailure(pub String);

fn manifest(command: &str, cfg: &RunConfig, config_path: Option<&Path>) -> Result<RunManifest> {
    let mut m = RunManifest::start(command, serde_json::to_value(cfg)?);
    let s = &cfg.suite;
    m.seeds = BTreeMap::from([("corpus".into(), s.corpus.seed), ("train".into(), s.train.seed), ("probe".into(), s.probe.seed)]);
    if let Some(p) = config_path {
        m.input(p)?;
    }
    Ok(m)
}

fn manifest_name(command: &str) -> String {
    format!("{command}.manifest.json")
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<EncoderModel> {
    require(path, "checkpoint")?;
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn embedding_file(code: ControlCode) -> String {
    format!("{}.emb", code.as_str().to_ascii_lowercase())
}

/// Every embedding file present in `dir`; missing codes are logged and skipped.
fn load_set(dir: &Path, m: &mut RunManifest) -> Result<EmbeddingSet> {
    require(dir, "embedding directory")?;
    let mut set = EmbeddingSet::new();
    for code in ControlCode::ALL {
        let p = dir.join(embedding_file(code));
        if !p.exists() {
            warn!("{} is missing; tasks that need {code} embeddings will fail", p.display());
            continue;
        }
        let e = load_embeddings(&p)?;
        if e.code != code {
            return Err(IoError::format(&p, format!("holds {} embeddings", e.code)).into());
        }
        m.input(&p)?;
        set.insert(code, e);
    }
    if set.is_empty() {
        return Err(IoError::format(dir, "no embedding files").into());
    }
    Ok(set)
}

fn dataset_inputs(data: &Path, m: &mut RunManifest, extra: &[PathBuf]) -> Result<()> {
    for name in [DOCUMENTS_FILE, QUERIES_FILE, TASKS_FILE] {
        m.input(&data.join(name))?;
    }
    for p in extra {
        m.input(p)?;
    }
    Ok(())
}

pub fn gen_data(cfg: &RunConfig, config_path: Option<&Path>, out: &Path) -> Result<()> {
    let outs = Outputs::open(out)?;
    let mut m = manifest("gen-data", cfg, config_path)?;
    let suite = prepare(&cfg.suite)?;
    for w in &suite.bench.warnings {
        warn!("{w}");
    }
    for p in write_dataset(out, &suite)? {
        m.output(&p)?;
    }
    info!(
        "wrote {} documents, {} queries, {} training and {} evaluation tasks to {}",
        suite.corpus.docs.len(),
        suite.corpus.queries.len(),
        suite.training.len(),
        suite.bench.tasks.len(),
        out.display()
    );
    m.finish(&outs.path(&manifest_name("gen-data")))?;
    outs.commit();
    Ok(())
}

pub fn train(cfg: &RunConfig, config_path: Option<&Path>, data: &Path, out: &Path, base: Option<&Path>) -> Result<()> {
    require(data, "data directory")?;
    let ds = load_dataset(data)?;
    let base_model = base.map(load_model).transpose()?;
    let outs = Outputs::open(out)?;
    let mut m = manifest("train", cfg, config_path)?;
    let train_files: Vec<PathBuf> = ds.training.iter().map(|t| data.join(&t.spec.train_path)).collect();
    dataset_inputs(data, &mut m, &train_files)?;
    let started = Instant::now();
    let base_model = match (base_model, base) {
        (Some(model), Some(p)) => {
            m.input(p)?;
            model
        }
        _ => {
            info!("training the shared base for {} epochs", cfg.suite.base_epochs);
            let o = pretrain_base(&ds.training, &ds.index, &cfg.suite)?;
            let (ckpt, trace) = (outs.path("base.ckpt"), outs.path("base_trace.jsonl"));
            save_checkpoint(&o.best, &ckpt)?;
            write_jsonl(&trace, &o.trace)?;
            m.output(&ckpt)?;
            m.output(&trace)?;
            o.best
        }
    };
    let variant = cfg.suite.encoder.variant;
    info!("training {variant}");
    let o = train_variant(&ds.training, &ds.index, &base_model, variant, &cfg.suite)?;
    let (ckpt, trace) = (outs.path("model.ckpt"), outs.path("loss_trace.jsonl"));
    save_checkpoint(&o.best, &ckpt)?;
    write_jsonl(&trace, &o.trace)?;
    m.output(&ckpt)?;
    m.output(&trace)?;
    m.checkpoint(&ckpt)?;
    info!("{variant}: {} steps in {:.1?}; checkpoint {}", o.steps, started.elapsed(), ckpt.display());
    m.finish(&outs.path(&manifest_name("train")))?;
    outs.commit();
    Ok(())
}

pub fn embed(cfg: &RunConfig, config_path: Option<&Path>, data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    require(data, "data directory")?;
    let ds = load_dataset(data)?;
    let outs = Outputs::open(out)?;
    let mut m = manifest("embed", cfg, config_path)?;
    dataset_inputs(data, &mut m, &[checkpoint.to_path_buf()])?;
    let set = embed_documents(&model, &ds.documents, cfg.suite.train.with_metadata)?;
    for (code, e) in &set {
        let p = outs.path(&embedding_file(*code));
        save_embeddings(e, &p)?;
        m.output(&p)?;
    }
    info!("embedded {} documents under {} codes into {}", ds.documents.len(), set.len(), out.display());
    m.finish(&outs.path(&manifest_name("embed")))?;
    outs.commit();
    Ok(())
}

pub struct EvalArgs<'a> {
    pub data: &'a Path,
    pub embeddings: &'a Path,
    pub ensemble: Option<&'a Path>,
    pub out: &'a Path,
    pub label: Option<&'a str>,
}

fn eval_inputs(cfg: &RunConfig, config_path: Option<&Path>, a: &EvalArgs, command: &str) -> Result<(RunManifest, EmbeddingSet)> {
    require(a.data, "data directory")?;
    let mut m = manifest(command, cfg, config_path)?;
    let mut set = load_set(a.embeddings, &mut m)?;
    if let Some(other) = a.ensemble {
        set = ensemble_embeddings(&set, &load_set(other, &mut m)?).map_err(|e| IoError::format(other, e.to_string()))?;
    }
    m.input(&a.data.join(fmtembed::io::BENCHMARK_FILE))?;
    Ok((m, set))
}

fn label_of(a: &EvalArgs) -> String {
    a.label.map(str::to_string).unwrap_or_else(|| {
        let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string());
        match a.ensemble {
            Some(o) => format!("{} + {}", name(a.embeddings), name(o)),
            None => name(a.embeddings),
        }
    })
}

pub fn eval(cfg: &RunConfig, config_path: Option<&Path>, a: &EvalArgs, cross: bool) -> Result<()> {
    let bench = load_benchmark(a.data)?;
    let (mut m, set) = eval_inputs(cfg, config_path, a, "eval")?;
    let outs = Outputs::open(a.out)?;
    let mut report = run_benchmark(&bench, &set, &cfg.suite.probe, &label_of(a));
    if cross {
        report.cross = Some(cross_format_matrix(&bench, &set, &cfg.suite.probe));
    }
    let table = report_table(&report);
    let (json, csv, txt) = (outs.path("report.json"), outs.path("report.csv"), outs.path("report.txt"));
    write_json(&json, &report)?;
    std::fs::write(&csv, report_csv(&report)?).with_context(|| format!("cannot write {}", csv.display()))?;
    std::fs::write(&txt, &table).with_context(|| format!("cannot write {}", txt.display()))?;
    for p in [&json, &csv, &txt] {
        m.output(p)?;
    }
    print!("{table}");
    m.finish(&outs.path(&manifest_name("eval")))?;
    outs.commit();
    Ok(())
}

pub fn cross_eval(cfg: &RunConfig, config_path: Option<&Path>, a: &EvalArgs) -> Result<()> {
    let bench = load_benchmark(a.data)?;
    let (mut m, set) = eval_inputs(cfg, config_path, a, "cross-eval")?;
    let outs = Outputs::open(a.out)?;
    let matrix = cross_format_matrix(&bench, &set, &cfg.suite.probe);
    let table = cross_table(&matrix);
    let (json, txt) = (outs.path("cross.json"), outs.path("cross.txt"));
    write_json(&json, &matrix)?;
    std::fs::write(&txt, &table).with_context(|| format!("cannot write {}", txt.display()))?;
    m.output(&json)?;
    m.output(&txt)?;
    print!("{table}");
    m.finish(&outs.path(&manifest_name("cross-eval")))?;
    outs.commit();
    Ok(())
}

#[derive(Debug, Serialize)]
struct GradSummary {
    case: String,
    checks: usize,
    max_rel_error: f64,
    passed: bool,
}

/// Central finite-difference checks of every primitive, every loss and random
/// composite graphs, one fresh draw per seed.
pub fn grad_check(seeds: u64, max_ops: usize, out: Option<&Path>) -> Result<()> {
    let started = Instant::now();
    let mut worst: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    let mut failures = Vec::new();
    for seed in 0..seeds {
        let cases = gradcheck::primitive_cases(seed)
            .into_iter()
            .chain(loss_cases(seed))
            .chain(std::iter::once(gradcheck::random_graph_case(seed, max_ops)));
        for case in cases {
            let r = case.run(FD_STEP).map_err(|e| anyhow!("{} (seed {seed}): {e}", case.name))?;
            let w = worst.entry(case.name.to_string()).or_insert((0, 0.0));
            w.0 += 1;
            // NaN must count as a failure, so compare with `!(<)`.
            if !(r.max_rel_error <= w.1) {
                w.1 = r.max_rel_error;
            }
            if !r.passed() {
                failures.push(format!("{} seed {seed}: relative error {:.3e}", case.name, r.max_rel_error));
            }
        }
    }
    let summary: Vec<GradSummary> = worst
        .into_iter()
        .map(|(case, (checks, e))| GradSummary { case, checks, max_rel_error: e, passed: e < FD_TOLERANCE })
        .collect();
    println!("{:<24} {:>7} {:>14}", "case", "checks", "max rel error");
    for s in &summary {
        println!("{:<24} {:>7} {:>14.3e}{}", s.case, s.checks, s.max_rel_error, if s.passed { "" } else { "  FAIL" });
    }
    println!("{} seeds in {:.1?}; tolerance {FD_TOLERANCE:e}", seeds, started.elapsed());
    if let Some(p) = out {
        write_json(p, &summary)?;
        let mut m = RunManifest::start("grad-check", serde_json::json!({ "seeds": seeds, "max_ops": max_ops }));
        m.output(p)?;
        m.finish(&sidecar(p))?;
    }
    if !failures.is_empty() {
        return Err(NumericFailure(format!("{} gradient checks failed:\n{}", failures.len(), failures.join("\n"))).into());
    }
    Ok(())
}

fn sidecar(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Renders a saved benchmark report or cross-format matrix.
pub fn report(input: &Path, csv: bool, out: Option<&Path>) -> Result<()> {
    require(input, "report")?;
    let text = std::fs::read_to_string(input).with_context(|| format!("cannot read {}", input.display()))?;
    let rendered = if let Ok(r) = serde_json::from_str::<BenchmarkReport>(&text) {
        if csv {
            report_csv(&r)?
        } else {
            report_table(&r)
        }
    } else {
        let c: CrossMatrix = serde_json::from_str(&text)
            .map_err(|e| IoError::format(input, format!("neither a benchmark report nor a cross-format matrix: {e}")))?;
        if csv {
            bail!("CSV output is available for benchmark reports only");
        }
        cross_table(&c)
    };
    match out {
        Some(p) => {
            std::fs::write(p, &rendered).with_context(|| format!("cannot write {}", p.display()))?;
            let mut m = RunManifest::start("report", serde_json::json!({ "csv": csv }));
            m.input(input)?;
            m.output(p)?;
            m.finish(&sidecar(p))?;
        }
        None => print!("{rendered}"),
    }
    Ok(())
}
