use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use faultline::bench::{self, BenchReport, Pipeline, Policy, Stage};
use faultline::config::RunConfig;
use faultline::container::{read_checkpoint, read_codebook, write_checkpoint, write_codebook};
use faultline::corpus::{bench_spec, generate, load_labels, CorpusSpec};
use faultline::embedding::PrototypeCodebook;
use faultline::env::Environment;
use faultline::ingest::{load_corpora, parse_text, EventStream};
use faultline::pipeline::{embed_records, localization, train, Dataset};
use faultline::planner::SelectMode;
use faultline::template::template_embed;
use faultline::trainer::{write_csv, Model};
use faultline::{Error, Result};
use serde::Serialize;

use crate::run::{io_at, Run};
use crate::{Cli, Command};

pub fn dispatch(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    match cli.command {
        Command::Parse {
            inputs,
            format,
            scales,
            codebook,
        } => {
            if format.is_some() {
                cfg.data.format = format;
            }
            if let Some(s) = scales {
                cfg.templates.scales = s;
            }
            cfg.validate()?;
            parse(cfg, inputs, codebook.as_deref())
        }
        Command::Fit { epochs, scales } => {
            if let Some(e) = epochs {
                cfg.trainer.epochs = e;
            }
            if let Some(s) = scales {
                cfg.templates.scales = s;
            }
            cfg.validate()?;
            fit(cfg)
        }
        Command::Infer {
            checkpoint,
            codebook,
            inputs,
        } => infer(cfg, &checkpoint, codebook, inputs),
        Command::Simulate { checkpoint, seeds, mode } => {
            if let Some(n) = seeds {
                cfg.bench.seeds = n;
            }
            simulate(cfg, &checkpoint, mode.into())
        }
        Command::Bench { sweep, parallel } => {
            if let Some(s) = sweep {
                cfg.bench.sweep_dims = parse_sweep(&s)?;
            }
            cfg.bench.parallel |= parallel;
            cfg.validate()?;
            bench(cfg)
        }
        Command::GenCorpus { records } => {
            if let Some(n) = records {
                cfg.corpus = bench_spec(n, cfg.corpus.seed);
            }
            cfg.validate()?;
            gen_corpus(cfg)
        }
    }
}

/// Parses `d=16,32,64`.
pub fn parse_sweep(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("--sweep expects d=<dim>,<dim>,..., got `{text}`"));
    let list = text.strip_prefix("d=").ok_or_else(bad)?;
    list.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect()
}

fn load_stream(inputs: &[PathBuf], run: &mut Run) -> Result<EventStream> {
    let cfg = &run.cfg;
    let paths = if inputs.is_empty() { cfg.data.corpus.clone() } else { inputs.to_vec() };
    if paths.is_empty() {
        return Err(Error::Config("no input logs given and data.corpus is empty".into()));
    }
    let (name, format) = cfg.format()?;
    let mut streams = load_corpora(&paths, &format, &name)?.into_iter();
    let mut stream = streams.next().expect("at least one input");
    for s in streams {
        stream.stats.matched += s.stats.matched;
        stream.stats.unmatched += s.stats.unmatched;
        stream.stats.blank += s.stats.blank;
        stream.records.extend(s.records);
    }
    paths.iter().for_each(|p| run.input(p));
    Ok(stream)
}

fn parse(cfg: RunConfig, inputs: Vec<PathBuf>, codebook: Option<&Path>) -> Result<()> {
    let mut run = Run::start("parse", cfg)?;
    let stream = load_stream(&inputs, &mut run)?;
    let vectors = embed_records(&stream.records, run.cfg.embedding.dim);
    let codebook = match codebook {
        Some(p) => {
            run.input(p);
            let cb = read_codebook(p)?;
            if cb.dim() != run.cfg.embedding.dim {
                return Err(Error::Artifact(format!(
                    "codebook {} has dimension {}, configuration asks for {}",
                    p.display(),
                    cb.dim(),
                    run.cfg.embedding.dim
                )));
            }
            cb
        }
        None => {
            let cb = faultline::pipeline::fit_codebook(&vectors, &run.cfg)?;
            let p = run.path("codebook.lidc");
            write_codebook(&p, &cb)?;
            run.record_output(p);
            cb
        }
    };
    let templates = template_embed(&vectors, &codebook, &run.cfg.templates.scales, run.cfg.templates.options())?;
    run.write_with("events.jsonl", |w| {
        for r in &stream.records {
            serde_json::to_writer(&mut *w, r).map_err(|e| Error::Artifact(e.to_string()))?;
            w.write_all(b"\n").map_err(io_at(Path::new("events.jsonl")))?;
        }
        Ok(())
    })?;
    run.write_with("templates.jsonl", |w| templates.write_jsonl(w).map_err(io_at(Path::new("templates.jsonl"))))?;
    let stats = serde_json::json!({
        "format": stream.format_id,
        "matched": stream.stats.matched,
        "unmatched": stream.stats.unmatched,
        "blank": stream.stats.blank,
        "records": stream.len(),
        "scales": run.cfg.templates.scales,
    });
    run.write_bytes("parse_stats.json", format!("{stats:#}\n").as_bytes())?;
    println!(
        "parsed {} records ({} unmatched, {} blank) into {}",
        stream.len(),
        stream.stats.unmatched,
        stream.stats.blank,
        run.cfg.out.display()
    );
    run.finish()
}

fn recovery_report(env: &Environment, model: &Model, seeds: usize) -> Result<bench::RecoveryComparison> {
    let seeds: Vec<u64> = (0..seeds as u64).collect();
    bench::measure_recovery(
        env,
        &seeds,
        Policy::Planner {
            model,
            mode: SelectMode::Greedy,
        },
        Policy::Uniform,
    )
}

fn fit(cfg: RunConfig) -> Result<()> {
    let start = Instant::now();
    let mut run = Run::start("fit", cfg)?;
    let data = Dataset::load(&run.cfg)?;
    for p in run.cfg.data.corpus.clone().iter().chain(run.cfg.data.labels.clone().iter()) {
        run.input(p);
    }
    let env = run.cfg.environment()?;
    if let Some(c) = run.cfg.env.campaign.clone() {
        run.input(&c);
    }
    let out = train(&run.cfg, &data, &env)?;

    let cb_path = run.path("codebook.lidc");
    write_codebook(&cb_path, &data.codebook)?;
    run.record_output(cb_path);
    let ck_path = run.path("checkpoint.lidp");
    write_checkpoint(&ck_path, &out.model.to_checkpoint(&env, &run.hash))?;
    run.record_output(ck_path.clone());
    run.write_with("history.csv", |w| write_csv(w, &out.history))?;
    run.write_with("curve.csv", |w| write_csv(w, &out.curve))?;

    if let Some(msg) = &out.diverged {
        run.finish()?;
        return Err(Error::Divergence(format!(
            "{msg}; last good checkpoint at {}",
            ck_path.display()
        )));
    }

    let val = data.validation_indices(&run.cfg);
    let (top1, topk) = localization(&out.model, &data, &val, run.cfg.bench.top_k)?;
    let recovery = recovery_report(&env, &out.model, run.cfg.bench.seeds)?;
    let (_, format) = run.cfg.format()?;
    let text: String = data.stream.records.iter().map(|r| r.raw.as_str()).collect::<Vec<_>>().join("\n");
    let reasoner = out.model.reasoner_params();
    let pipeline = Pipeline {
        format: &format,
        codebook: &data.codebook,
        scales: &run.cfg.templates.scales,
        options: run.cfg.templates.options(),
        reasoner: &reasoner,
        seq_len: run.cfg.corpus.seq_len,
        stage: Stage::Full,
        parallel: run.cfg.bench.parallel,
    };
    // toy corpora are below the harness minimum; time a single pass instead
    let lat = if data.stream.len() >= bench::MIN_LAT_RECORDS {
        bench::measure_lat(&text, &pipeline, run.cfg.bench.repetitions)?
    } else {
        let t = Instant::now();
        let (records, _) = pipeline.run(&text)?;
        let rate = records as f64 / t.elapsed().as_secs_f64().max(1e-9);
        bench::LatMeasurement {
            records,
            records_per_second: rate,
            runs: vec![rate],
        }
    };
    let report = BenchReport {
        dim: data.codebook.dim(),
        records: lat.records,
        records_per_second: lat.records_per_second,
        mean_recovery_steps: recovery.planner_mean(),
        baseline_recovery_steps: recovery.baseline_mean(),
        localization_top1: top1,
        localization_topk: topk,
        parallel: run.cfg.bench.parallel,
        config_hash: run.hash.clone(),
        wall_clock: start.elapsed().as_secs_f64(),
    };
    let mut summary = Vec::new();
    writeln!(
        summary,
        "trained {} epochs (best {}, {}), {} train / {} validation sequences",
        out.history.len(),
        out.best_epoch,
        if out.stopped_early { "stopped early" } else { "ran to the epoch limit" },
        out.train_size,
        out.val_size
    )
    .expect("in-memory write");
    bench::write_summary(&mut summary, std::slice::from_ref(&report)).expect("in-memory write");
    run.write_bytes("summary.txt", &summary)?;
    print!("{}", String::from_utf8_lossy(&summary));
    run.finish()
}

fn load_model(run: &mut Run, checkpoint: &Path) -> Result<(Model, Environment)> {
    run.input(checkpoint);
    let ck = read_checkpoint(checkpoint)?;
    Model::from_checkpoint(&ck, checkpoint)
}

#[derive(Serialize)]
struct ScoreRow {
    sequence: usize,
    start: usize,
    len: usize,
    top: Vec<(usize, f64)>,
    label: Option<usize>,
}

fn infer(cfg: RunConfig, checkpoint: &Path, codebook: Option<PathBuf>, inputs: Vec<PathBuf>) -> Result<()> {
    let mut run = Run::start("infer", cfg)?;
    let (model, _) = load_model(&mut run, checkpoint)?;
    let cb_path = codebook.unwrap_or_else(|| checkpoint.with_file_name("codebook.lidc"));
    run.input(&cb_path);
    let codebook: PrototypeCodebook = read_codebook(&cb_path)?;
    let dim = model.reasoner_params().dim();
    if codebook.dim() != dim {
        return Err(Error::Artifact(format!(
            "codebook {} has dimension {} but the checkpoint expects {dim}",
            cb_path.display(),
            codebook.dim()
        )));
    }
    let stream = load_stream(&inputs, &mut run)?;
    let vectors = embed_records(&stream.records, dim);
    let labels = match (run.cfg.data.labels.clone(), inputs.is_empty()) {
        (Some(p), true) => {
            run.input(&p);
            Some(load_labels(&p)?)
        }
        _ => None,
    };
    let spans: Vec<(usize, usize, Option<usize>)> = match &labels {
        Some(ls) => ls.iter().map(|l| (l.start, l.len, Some(l.chain[0]))).collect(),
        None => (0..vectors.len())
            .step_by(run.cfg.corpus.seq_len)
            .map(|s| (s, run.cfg.corpus.seq_len.min(vectors.len() - s), None))
            .collect(),
    };
    let mut rows = Vec::with_capacity(spans.len());
    let mut scores = Vec::new();
    for (sequence, &(start, len, label)) in spans.iter().enumerate() {
        if start + len > vectors.len() {
            return Err(Error::Config(format!("label span {start}..{} exceeds the corpus", start + len)));
        }
        let t = template_embed(&vectors[start..start + len], &codebook, &run.cfg.templates.scales, run.cfg.templates.options())?;
        let s = model.score(&t);
        rows.push(ScoreRow {
            sequence,
            start,
            len,
            top: s.ranking.iter().take(run.cfg.bench.top_k).map(|&i| (i, s.psi[i])).collect(),
            label,
        });
        scores.push(s);
    }
    run.write_with("scores.jsonl", |w| {
        for r in &rows {
            serde_json::to_writer(&mut *w, r).map_err(|e| Error::Artifact(e.to_string()))?;
            w.write_all(b"\n").map_err(io_at(Path::new("scores.jsonl")))?;
        }
        Ok(())
    })?;
    println!("scored {} sequences into {}", rows.len(), run.path("scores.jsonl").display());
    if let Some(ls) = &labels {
        let truth: Vec<usize> = ls.iter().map(|l| l.chain[0]).collect();
        let (t1, tk) = bench::localization_accuracy(&scores, &truth, run.cfg.bench.top_k)?;
        println!("localization top-1 {t1:.3}, top-{} {tk:.3}", run.cfg.bench.top_k);
    }
    run.finish()
}

fn simulate(cfg: RunConfig, checkpoint: &Path, mode: SelectMode) -> Result<()> {
    let mut run = Run::start("simulate", cfg)?;
    let (model, env) = load_model(&mut run, checkpoint)?;
    let seeds: Vec<u64> = (0..run.cfg.bench.seeds as u64).collect();
    let cmp = bench::measure_recovery(&env, &seeds, Policy::Planner { model: &model, mode }, Policy::Uniform)?;
    for ep in &cmp.planner_episodes {
        let name = format!("traces/seed-{:04}.jsonl", ep.seed);
        run.write_with(&name, |w| ep.write_jsonl(w).map_err(io_at(Path::new(&name))))?;
    }
    run.write_with("pairs.csv", |w| bench::write_pairs_csv(w, &cmp.pairs))?;
    let capped = cmp.pairs.iter().filter(|p| p.planner_capped).count();
    println!("recovery time is measured in environment steps, not seconds");
    println!(
        "{} seeds: planner {:.2} steps, uniform baseline {:.2} steps, {capped} planner episodes hit the horizon",
        seeds.len(),
        cmp.planner_mean(),
        cmp.baseline_mean()
    );
    run.finish()
}

fn bench(cfg: RunConfig) -> Result<()> {
    let mut run = Run::start("bench", cfg)?;
    let (name, format) = run.cfg.format()?;
    let text = if run.cfg.data.corpus.is_empty() {
        generate(&bench_spec(run.cfg.bench.records, run.cfg.seed))?.lines.join("\n")
    } else {
        let stream = load_stream(&[], &mut run)?;
        stream.records.iter().map(|r| r.raw.as_str()).collect::<Vec<_>>().join("\n")
    };
    // fail fast on an undersized corpus before any training
    let probe = parse_text(&text, &format, &name, Path::new("<bench>"))?;
    if probe.len() < bench::MIN_LAT_RECORDS {
        return Err(Error::Config(format!(
            "throughput needs at least {} records, corpus has {}",
            bench::MIN_LAT_RECORDS,
            probe.len()
        )));
    }
    drop(probe);

    let dims = if run.cfg.bench.sweep_dims.is_empty() {
        vec![run.cfg.embedding.dim]
    } else {
        run.cfg.bench.sweep_dims.clone()
    };
    let labeled = generate(&run.cfg.corpus)?;
    let mut reports = Vec::new();
    for d in dims {
        let start = Instant::now();
        let mut cfg_d = run.cfg.clone();
        cfg_d.embedding.dim = d;
        cfg_d.bench.sweep_dims.clear();
        let data = if cfg_d.data.labels.is_some() && !cfg_d.data.corpus.is_empty() {
            Dataset::load(&cfg_d)?
        } else {
            Dataset::from_synthetic(&labeled, &cfg_d)?
        };
        let env = cfg_d.environment()?;
        let out = train(&cfg_d, &data, &env)?;
        if let Some(msg) = out.diverged {
            return Err(Error::Divergence(format!("d = {d}: {msg}")));
        }
        let val = data.validation_indices(&cfg_d);
        let (top1, topk) = localization(&out.model, &data, &val, cfg_d.bench.top_k)?;
        let recovery = recovery_report(&env, &out.model, cfg_d.bench.seeds)?;
        run.write_with(&format!("pairs-d{d}.csv"), |w| bench::write_pairs_csv(w, &recovery.pairs))?;
        let reasoner = out.model.reasoner_params();
        let pipeline = Pipeline {
            format: &format,
            codebook: &data.codebook,
            scales: &cfg_d.templates.scales,
            options: cfg_d.templates.options(),
            reasoner: &reasoner,
            seq_len: cfg_d.corpus.seq_len,
            stage: Stage::Full,
            parallel: cfg_d.bench.parallel,
        };
        let lat = bench::measure_lat(&text, &pipeline, cfg_d.bench.repetitions)?;
        let report = BenchReport {
            dim: d,
            records: lat.records,
            records_per_second: lat.records_per_second,
            mean_recovery_steps: recovery.planner_mean(),
            baseline_recovery_steps: recovery.baseline_mean(),
            localization_top1: top1,
            localization_topk: topk,
            parallel: cfg_d.bench.parallel,
            config_hash: cfg_d.hash(),
            wall_clock: start.elapsed().as_secs_f64(),
        };
        eprintln!("d = {d}: {:.0} records/s", report.records_per_second);
        reports.push(report);
    }
    run.write_with("bench.csv", |w| bench::write_reports_csv(w, &reports))?;
    let mut summary = Vec::new();
    bench::write_summary(&mut summary, &reports).expect("in-memory write");
    run.write_bytes("bench.txt", &summary)?;
    print!("{}", String::from_utf8_lossy(&summary));
    run.finish()
}

fn gen_corpus(cfg: RunConfig) -> Result<()> {
    let mut run = Run::start("gen-corpus", cfg)?;
    let spec: CorpusSpec = run.cfg.corpus;
    let corpus = generate(&spec)?;
    corpus.write(&run.cfg.out)?;
    run.record_output(run.path("corpus.log"));
    run.record_output(run.path("labels.jsonl"));
    println!(
        "wrote {} records in {} labeled sequences to {}",
        corpus.lines.len(),
        corpus.labels.len(),
        run.cfg.out.display()
    );
    run.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_syntax() {
        assert_eq!(parse_sweep("d=16,32,64").unwrap(), vec![16, 32, 64]);
        assert!(parse_sweep("16,32").is_err());
        assert!(parse_sweep("d=16,x").is_err());
    }
}
