//! Throughput, recovery and localization measurements.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::embedding::{embed_event, EventVector, PrototypeCodebook};
use crate::env::{run_episode, Environment, Episode, RecoveryAction};
use crate::error::{Error, Result};
use crate::ingest::{parse_text, tokenize, HeaderFormat};
use crate::planner::{select_action, SelectMode};
use crate::reasoner::{self, ReasonerParams, RootCauseScores};
use crate::template::{template_embed, TemplateOptions};
use crate::trainer::Model;

pub const MIN_LAT_RECORDS: usize = 1000;
pub const MIN_RECOVERY_SEEDS: usize = 20;

/// How far through the analysis pipeline records are pushed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Template,
    Full,
}

#[derive(Debug, Clone, Copy)]
pub struct Pipeline<'a> {
    pub format: &'a HeaderFormat,
    pub codebook: &'a PrototypeCodebook,
    pub scales: &'a [usize],
    pub options: TemplateOptions,
    pub reasoner: &'a ReasonerParams,
    /// Records per reasoning sequence.
    pub seq_len: usize,
    pub stage: Stage,
    pub parallel: bool,
}

impl Pipeline<'_> {
    /// Processes `text` and returns the number of records and a checksum of the scores.
    pub fn run(&self, text: &str) -> Result<(usize, f64)> {
        let stream = parse_text(text, self.format, "bench", Path::new("<bench>"))?;
        if self.stage == Stage::Ingest {
            return Ok((stream.len(), 0.0));
        }
        let d = self.codebook.dim();
        let chunk = |records: &[crate::ingest::LogRecord]| -> Result<f64> {
            let vectors: Vec<EventVector> = records.iter().map(|r| embed_event(&tokenize(&r.message), d)).collect();
            let templates = template_embed(&vectors, self.codebook, self.scales, self.options)?;
            if self.stage == Stage::Template {
                return Ok(templates.templates.iter().map(|t| t[0]).sum());
            }
            let rows: Vec<&[f64]> = templates.templates.iter().map(|t| t.as_slice()).collect();
            let (_, scores) = reasoner::infer(&crate::autodiff::Tensor::from_rows(&rows), self.reasoner);
            Ok(scores.psi.iter().sum())
        };
        let chunks: Vec<&[crate::ingest::LogRecord]> = stream.records.chunks(self.seq_len).collect();
        let sums: Vec<f64> = if self.parallel {
            chunks.par_iter().map(|c| chunk(c)).collect::<Result<_>>()?
        } else {
            chunks.iter().map(|c| chunk(c)).collect::<Result<_>>()?
        };
        Ok((stream.len(), sums.iter().sum()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatMeasurement {
    pub records: usize,
    pub records_per_second: f64,
    /// Throughput of every timed repetition.
    pub runs: Vec<f64>,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median records per second over `repetitions` timed runs after one warm-up run.
pub fn measure_lat(text: &str, pipeline: &Pipeline, repetitions: usize) -> Result<LatMeasurement> {
    if repetitions == 0 {
        return Err(Error::Config("bench.repetitions must be positive".into()));
    }
    let (records, _) = pipeline.run(text)?;
    if records < MIN_LAT_RECORDS {
        return Err(Error::Config(format!(
            "throughput needs at least {MIN_LAT_RECORDS} records, corpus has {records}"
        )));
    }
    let mut runs = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        let (n, checksum) = pipeline.run(text)?;
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        std::hint::black_box(checksum);
        runs.push(n as f64 / secs);
    }
    Ok(LatMeasurement {
        records,
        records_per_second: median(&runs),
        runs,
    })
}

/// Who picks recovery actions.
#[derive(Debug, Clone, Copy)]
pub enum Policy<'a> {
    Planner { model: &'a Model, mode: SelectMode },
    Uniform,
    Table,
}

/// Runs one episode; stochastic choices are seeded from the episode seed.
pub fn run_policy(env: &Environment, seed: u64, policy: Policy) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_6e64_6f6d);
    let services = env.services;
    let actions = env.action_count();
    match policy {
        Policy::Planner { model, mode } => run_episode(env, seed, |s| {
            let dist = model.policy.distribution(&model.params, &s.observation());
            RecoveryAction::from_index(select_action(&dist, mode, &mut rng), services)
        }),
        Policy::Uniform => run_episode(env, seed, |_| RecoveryAction::from_index(rng.random_range(0..actions), services)),
        Policy::Table => run_episode(env, seed, Environment::table_action),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryPair {
    pub seed: u64,
    pub planner_steps: usize,
    pub baseline_steps: usize,
    /// Episode hit the horizon without clearing and was counted as the horizon.
    pub planner_capped: bool,
    pub baseline_capped: bool,
}

#[derive(Debug, Clone)]
pub struct RecoveryComparison {
    pub pairs: Vec<RecoveryPair>,
    pub planner_episodes: Vec<Episode>,
    pub baseline_episodes: Vec<Episode>,
}

impl RecoveryComparison {
    pub fn planner_mean(&self) -> f64 {
        self.pairs.iter().map(|p| p.planner_steps as f64).sum::<f64>() / self.pairs.len() as f64
    }

    pub fn baseline_mean(&self) -> f64 {
        self.pairs.iter().map(|p| p.baseline_steps as f64).sum::<f64>() / self.pairs.len() as f64
    }
}

/// Paired steps-to-clear of `planner` and `baseline` on the same seeds.
pub fn measure_recovery(env: &Environment, seeds: &[u64], planner: Policy, baseline: Policy) -> Result<RecoveryComparison> {
    if seeds.len() < MIN_RECOVERY_SEEDS {
        return Err(Error::Config(format!(
            "recovery comparison needs at least {MIN_RECOVERY_SEEDS} seeds, got {}",
            seeds.len()
        )));
    }
    let mut out = RecoveryComparison {
        pairs: Vec::with_capacity(seeds.len()),
        planner_episodes: Vec::with_capacity(seeds.len()),
        baseline_episodes: Vec::with_capacity(seeds.len()),
    };
    for &seed in seeds {
        let a = run_policy(env, seed, planner)?;
        let b = run_policy(env, seed, baseline)?;
        out.pairs.push(RecoveryPair {
            seed,
            planner_steps: a.steps_to_clear(env.horizon),
            baseline_steps: b.steps_to_clear(env.horizon),
            planner_capped: !a.cleared,
            baseline_capped: !b.cleared,
        });
        out.planner_episodes.push(a);
        out.baseline_episodes.push(b);
    }
    Ok(out)
}

/// Top-1 and top-`k` hit rates of the score rankings against root-cause labels.
pub fn localization_accuracy(scores: &[RootCauseScores], labels: &[usize], k: usize) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} score sets but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut top1, mut topk) = (0usize, 0usize);
    for (s, &l) in scores.iter().zip(labels) {
        top1 += usize::from(s.ranking.first() == Some(&l));
        topk += usize::from(s.ranking.iter().take(k).any(|r| *r == l));
    }
    let n = scores.len() as f64;
    Ok((top1 as f64 / n, topk as f64 / n))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    /// Reasoner dimension of this row.
    pub dim: usize,
    pub records: usize,
    pub records_per_second: f64,
    /// Environment steps, not seconds.
    pub mean_recovery_steps: f64,
    pub baseline_recovery_steps: f64,
    pub localization_top1: f64,
    pub localization_topk: f64,
    pub parallel: bool,
    pub config_hash: String,
    pub wall_clock: f64,
}

pub fn write_reports_csv<W: Write>(out: W, reports: &[BenchReport]) -> Result<()> {
    crate::trainer::write_csv(out, reports)
}

pub fn write_summary<W: Write>(mut out: W, reports: &[BenchReport]) -> std::io::Result<()> {
    writeln!(out, "recovery time is measured in environment steps, not seconds")?;
    for r in reports {
        writeln!(out, "d = {} ({} records, {})", r.dim, r.records, if r.parallel { "parallel" } else { "single thread" })?;
        writeln!(out, "  throughput            {:.1} records/s", r.records_per_second)?;
        writeln!(out, "  mean recovery steps   {:.2} (uniform baseline {:.2})", r.mean_recovery_steps, r.baseline_recovery_steps)?;
        writeln!(out, "  localization top-1    {:.3}", r.localization_top1)?;
        writeln!(out, "  localization top-k    {:.3}", r.localization_topk)?;
        writeln!(out, "  config hash           {}", r.config_hash)?;
        writeln!(out, "  wall clock            {:.2} s", r.wall_clock)?;
    }
    Ok(())
}

pub fn write_pairs_csv<W: Write>(out: W, pairs: &[RecoveryPair]) -> Result<()> {
    crate::trainer::write_csv(out, pairs)
}
