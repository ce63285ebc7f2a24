//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use faultline::autodiff::special::kl_beta_uniform;
use faultline::autodiff::{check_gradients, ParamSet, Tensor};
use faultline::bench::{measure_recovery, Policy};
use faultline::config::RunConfig;
use faultline::corpus::generate;
use faultline::embedding::{EventVector, PrototypeCodebook};
use faultline::pipeline::{localization, train, Dataset};
use faultline::planner::{beta_mean, rl_targets, shape_policy, Hyper, PlannerOptions, PolicyBundle, SelectMode, Transition};
use faultline::reasoner::{multi_hop_update, ReasonerParams};
use faultline::template::{template_embed, TemplateOptions};
use faultline::trainer::{total_loss_on_tape, FitOutcome, Lambdas, LabeledSequence, Model};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let t = start.elapsed();
    if t < limit {
        Ok(t)
    } else {
        Err(format!("took {t:.2?}, limit {limit:?}"))
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn attention_rows_sum_to_one() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let t = rng.random_range(1..=64);
        let d = rng.random_range(1..=32);
        let mut p = ReasonerParams::init(d, rng.random_range(1..=3), rng.random());
        p.w_a = random_matrix(&mut rng, d, d);
        let hidden = multi_hop_update(&random_matrix(&mut rng, t, d), &p);
        for g in &hidden.graphs {
            for row in g.matrix.iter_rows() {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    let t = within(Duration::from_secs(5), start)?;
    check(worst <= 1e-9, format!("max |row sum - 1| = {worst:.2e} over 100 instances in {t:.2?}"))
}

/// Straight-line reasoner: cosine-bilinear scores, row softmax, ReLU propagation, sigmoid readout.
fn brute_force_psi(h0: &[Vec<f64>], w: &[Vec<f64>], w_psi: &[f64], rounds: usize) -> Vec<f64> {
    let t = h0.len();
    let d = w_psi.len();
    let mut h = h0.to_vec();
    for _ in 0..rounds {
        let norms: Vec<f64> = h.iter().map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-8)).collect();
        let mut next = vec![vec![0.0; d]; t];
        for i in 0..t {
            let mut scores = vec![0.0; t];
            for (j, s) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for a in 0..d {
                    for b in 0..d {
                        acc += h[i][a] * w[a][b] * h[j][b];
                    }
                }
                *s = acc / (norms[i] * norms[j]);
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..t {
                let a = (scores[j] - m).exp() / z;
                for c in 0..d {
                    next[i][c] += a * h[j][c];
                }
            }
            next[i].iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = next;
    }
    h.iter()
        .map(|v| 1.0 / (1.0 + (-v.iter().zip(w_psi).map(|(x, y)| x * y).sum::<f64>()).exp()))
        .collect()
}

fn reasoner_matches_brute_force() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for t in 2..=6 {
        for d in 2..=4 {
            for rounds in 1..=3 {
                let h0 = random_matrix(&mut rng, t, d);
                let mut p = ReasonerParams::init(d, rounds, 0);
                p.w_a = random_matrix(&mut rng, d, d);
                p.w_psi = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (_, scores) = faultline::reasoner::infer(&h0, &p);
                let rows = |m: &Tensor| m.iter_rows().map(|r| r.to_vec()).collect::<Vec<_>>();
                let oracle = brute_force_psi(&rows(&h0), &rows(&p.w_a), &p.w_psi, rounds);
                for (a, b) in scores.psi.iter().zip(&oracle) {
                    worst = worst.max((a - b).abs());
                }
                cases += 1;
            }
        }
    }
    let t = within(Duration::from_secs(10), start)?;
    check(worst <= 1e-9, format!("max |psi - oracle| = {worst:.2e} over {cases} cases in {t:.2?}"))
}

fn template_matches_naive_loops() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst, mut worst_sum, mut hull_violations) = (0.0f64, 0.0f64, 0);
    for _ in 0..50 {
        let t = rng.random_range(2..=40);
        let d = rng.random_range(2..=8);
        let k = rng.random_range(1..=6);
        let tau = rng.random_range(0.1..2.0);
        let mut scales: Vec<usize> = [1, 2, 3, 5, 7].into_iter().filter(|_| rng.random_bool(0.5)).collect();
        if scales.is_empty() || scales.iter().all(|&s| s > t) {
            scales.push(2);
        }
        let protos: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let codebook = PrototypeCodebook::new(protos.clone(), tau, 0).map_err(|e| e.to_string())?;
        let events: Vec<EventVector> = (0..t).map(|_| EventVector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let got = template_embed(&events, &codebook, &scales, TemplateOptions::default()).map_err(|e| e.to_string())?;

        let fitting: Vec<usize> = scales.iter().copied().filter(|&s| s <= t).collect();
        let smallest = *fitting.iter().min().unwrap();
        for i in 0..t {
            let mut sources: Vec<(usize, usize)> = fitting.iter().filter(|&&s| i + s <= t).map(|&s| (s, i)).collect();
            if sources.is_empty() {
                sources.push((smallest, t - smallest));
            }
            let mut coeff = vec![0.0; k];
            for &(s, start) in &sources {
                let mut mean = vec![0.0; d];
                for e in &events[start..start + s] {
                    for (m, x) in mean.iter_mut().zip(&e.0) {
                        *m += x / s as f64;
                    }
                }
                let logits: Vec<f64> = protos
                    .iter()
                    .map(|p| -p.iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / tau)
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for (c, l) in coeff.iter_mut().zip(&logits) {
                    *c += (l - m).exp() / z / sources.len() as f64;
                }
            }
            for c in 0..d {
                let expect: f64 = (0..k).map(|j| coeff[j] * protos[j][c]).sum();
                worst = worst.max((got.templates[i][c] - expect).abs());
                let lo = protos.iter().map(|p| p[c]).fold(f64::INFINITY, f64::min);
                let hi = protos.iter().map(|p| p[c]).fold(f64::NEG_INFINITY, f64::max);
                if got.templates[i][c] < lo - 1e-12 || got.templates[i][c] > hi + 1e-12 {
                    hull_violations += 1;
                }
            }
            worst_sum = worst_sum.max((got.weights[i].iter().sum::<f64>() - 1.0).abs());
        }
    }
    check(
        worst <= 1e-10 && worst_sum <= 1e-12 && hull_violations == 0,
        format!("max deviation {worst:.2e}, weight sum error {worst_sum:.2e}, hull violations {hull_violations}"),
    )
}

fn joint_gradients_match() -> Outcome {
    let start = Instant::now();
    let (t, d, k, rounds, actions) = (4, 3, 2, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let protos: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let codebook = PrototypeCodebook::new(protos, 0.5, 0).map_err(|e| e.to_string())?;
    let seqs: Vec<LabeledSequence> = (0..2)
        .map(|s| {
            let events: Vec<EventVector> = (0..t).map(|_| EventVector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
            let templ = template_embed(&events, &codebook, &[1, 2], TemplateOptions::default()).unwrap();
            LabeledSequence::new(templ, vec![s, s + 1]).unwrap()
        })
        .collect();
    let mut params = ParamSet::new();
    let mut reasoner = ReasonerParams::init(d, rounds, 5);
    reasoner.w_psi = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let handles = reasoner.register(&mut params);
    let policy = PolicyBundle::new(&mut params, 3, actions, PlannerOptions::default(), 9);
    let batch: Vec<Transition> = (0..3)
        .map(|i| Transition {
            obs: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            action: i % actions,
            reward: rng.random_range(-1.0..1.0),
            next_obs: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            done: i == 2,
        })
        .collect();
    let model = Model {
        params,
        reasoner: handles,
        policy,
    };
    let hyper = Hyper::default();
    let lambdas = Lambdas::default();
    let targets = rl_targets(&model.policy, &model.params, &batch, hyper.gamma);
    let report = check_gradients(
        |tape, p| total_loss_on_tape(tape, &model, p, &seqs, &batch, &targets, &hyper, lambdas, 0.1).total,
        &model.params,
        1e-5,
    );
    let t = within(Duration::from_secs(30), start)?;
    check(
        report.max_rel_error < 1e-4 && report.checked > 0,
        format!(
            "max relative error {:.2e} over {} coordinates ({} kink coordinates skipped) in {t:.2?}",
            report.max_rel_error, report.checked, report.skipped
        ),
    )
}

/// Tanh-sinh quadrature on (0, 1); `f` receives `(x, ln x, ln(1 - x))`.
fn tanh_sinh(f: impl Fn(f64, f64, f64) -> f64) -> f64 {
    let h = 1.0 / 64.0;
    let mut sum = 0.0;
    for n in -(6 * 64)..=(6 * 64) {
        let t = n as f64 * h;
        let u = std::f64::consts::FRAC_PI_2 * t.sinh();
        // x = 1 / (1 + e^{-2u}), 1 - x = 1 / (1 + e^{2u})
        let ln_x = -(-2.0 * u).exp().ln_1p();
        let ln_1mx = -(2.0 * u).exp().ln_1p();
        let x = ln_x.exp();
        let w = std::f64::consts::FRAC_PI_2 * t.cosh() / (2.0 * u.cosh() * u.cosh());
        if w == 0.0 {
            continue;
        }
        sum += w * f(x, ln_x, ln_1mx);
    }
    sum * h
}

fn beta_kl_correct() -> Outcome {
    let grid = [0.5, 1.0, 2.0, 3.0, 5.0];
    let exact_zero = kl_beta_uniform(1.0, 1.0) == 0.0;
    let (mut min_kl, mut worst_quad, mut worst_mc) = (f64::INFINITY, 0.0f64, 0.0f64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &a in &grid {
        for &b in &grid {
            let kl = kl_beta_uniform(a, b);
            min_kl = min_kl.min(kl);
            let log_kernel = |lx: f64, l1: f64| (a - 1.0) * lx + (b - 1.0) * l1;
            let z = tanh_sinh(|_, lx, l1| log_kernel(lx, l1).exp());
            let ln_z = z.ln();
            let quad = tanh_sinh(|_, lx, l1| {
                let lp = log_kernel(lx, l1) - ln_z;
                lp.exp() * lp
            });
            worst_quad = worst_quad.max((quad - kl).abs());
            let dist = Beta::new(a, b).map_err(|e| e.to_string())?;
            let n = 1_000_000;
            let mean = (0..n).map(|_| dist.sample(&mut rng)).sum::<f64>() / n as f64;
            worst_mc = worst_mc.max((mean - beta_mean(a, b)).abs());
        }
    }
    check(
        exact_zero && min_kl >= 0.0 && worst_quad <= 1e-6 && worst_mc <= 1e-2,
        format!(
            "KL(1,1) exactly 0: {exact_zero}, min grid KL {min_kl:.3e}, quadrature gap {worst_quad:.2e}, Monte Carlo mean gap {worst_mc:.2e}"
        ),
    )
}

fn shaping_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_equal, mut worst_scale, mut support_breaks) = (0.0f64, 0.0f64, 0);
    for _ in 0..1000 {
        let n = rng.random_range(2..=31);
        let mut base: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() }).collect();
        if base.iter().all(|&p| p == 0.0) {
            base[0] = 1.0;
        }
        let z: f64 = base.iter().sum();
        base.iter_mut().for_each(|p| *p /= z);
        let with_means = |means: &[f64], rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
            let s: Vec<f64> = means.iter().map(|_| rng.random_range(0.5..20.0)).collect();
            (
                means.iter().zip(&s).map(|(m, s)| m * s).collect(),
                means.iter().zip(&s).map(|(m, s)| (1.0 - m) * s).collect(),
            )
        };
        let m = rng.random_range(0.05..0.95);
        let (a, b) = with_means(&vec![m; n], &mut rng);
        let equal = shape_policy(&base, &a, &b);
        worst_equal = worst_equal.max(equal.shaped.iter().zip(&base).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));

        let means: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.45)).collect();
        let c = rng.random_range(0.1..2.0);
        let scaled: Vec<f64> = means.iter().map(|m| m * c).collect();
        let (a1, b1) = with_means(&means, &mut rng);
        let (a2, b2) = with_means(&scaled, &mut rng);
        let s1 = shape_policy(&base, &a1, &b1);
        let s2 = shape_policy(&base, &a2, &b2);
        worst_scale = worst_scale.max(s1.shaped.iter().zip(&s2.shaped).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        support_breaks += base.iter().zip(&s1.shaped).filter(|(p, q)| (**p > 0.0) != (**q > 0.0)).count();
    }
    check(
        worst_equal <= 1e-12 && worst_scale <= 1e-12 && support_breaks == 0,
        format!("equal-means gap {worst_equal:.2e}, rescaling gap {worst_scale:.2e}, support changes {support_breaks} over 1000 instances"),
    )
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Tuned profile shipped for the synthetic localization benchmark.
fn localization_config() -> RunConfig {
    RunConfig::load(&workspace_root().join("configs/localization.toml")).expect("profile loads")
}

struct Trained {
    data: Dataset,
    outcome: FitOutcome,
    elapsed: Duration,
}

fn shaped_run() -> &'static Trained {
    static RUN: OnceLock<Trained> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let cfg = localization_config();
        let data = Dataset::from_synthetic(&generate(&cfg.corpus).unwrap(), &cfg).unwrap();
        let outcome = train(&cfg, &data, &cfg.environment().unwrap()).unwrap();
        Trained {
            data,
            outcome,
            elapsed: start.elapsed(),
        }
    })
}

fn localization_accuracy() -> Outcome {
    let cfg = localization_config();
    let run = shaped_run();
    let val = run.data.validation_indices(&cfg);
    let (top1, top3) = localization(&run.outcome.model, &run.data, &val, 3).map_err(|e| e.to_string())?;
    let floor = 3.0 / cfg.corpus.seq_len as f64;
    if run.elapsed > Duration::from_secs(600) {
        return Err(format!("fit took {:.2?}", run.elapsed));
    }
    check(
        top1 >= 0.70 && top1 >= floor,
        format!(
            "validation top-1 {top1:.3} (threshold 0.700, floor {floor:.3}), top-3 {top3:.3}, {} held-out sequences, {} epochs in {:.2?}",
            val.len(),
            run.outcome.history.len(),
            run.elapsed
        ),
    )
}

fn recovery_improves() -> Outcome {
    let start = Instant::now();
    let shaped = shaped_run();
    let mut cfg = localization_config();
    cfg.planner.shaping = false;
    cfg.trainer.lambdas.kl = 0.0;
    let env = cfg.environment().map_err(|e| e.to_string())?;
    let unshaped = train(&cfg, &shaped.data, &env).map_err(|e| e.to_string())?;
    let seeds: Vec<u64> = (0..20).collect();
    let greedy = |model| Policy::Planner {
        model,
        mode: SelectMode::Greedy,
    };
    let a = measure_recovery(&env, &seeds, greedy(&shaped.outcome.model), Policy::Uniform).map_err(|e| e.to_string())?;
    let b = measure_recovery(&env, &seeds, greedy(&unshaped.model), Policy::Uniform).map_err(|e| e.to_string())?;
    let t = within(Duration::from_secs(300), start)?;
    let (s, u, r) = (a.planner_mean(), b.planner_mean(), a.baseline_mean());
    check(
        s < r && s <= u + 0.5,
        format!("mean steps over 20 paired seeds: shaped {s:.2}, unshaped {u:.2}, uniform {r:.2} ({t:.2?})"),
    )
}

fn faultline(args: &[&str], cwd: &Path) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_faultline"))
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("faultline {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn same_files(a: &Path, b: &Path, names: &[String]) -> Result<usize, String> {
    for n in names {
        let x = std::fs::read(a.join(n)).map_err(|e| format!("{n}: {e}"))?;
        let y = std::fs::read(b.join(n)).map_err(|e| format!("{n}: {e}"))?;
        if x != y {
            return Err(format!("{n} differs between runs"));
        }
    }
    Ok(names.len())
}

fn runs_are_deterministic() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    std::fs::write(
        root.join("run.toml"),
        "[data]\ncorpus = [\"data/corpus.log\"]\nlabels = \"data/labels.jsonl\"\n[corpus]\nsequences = 40\n[trainer]\nrl_updates_per_epoch = 10\n",
    )
    .map_err(|e| e.to_string())?;
    faultline(&["--config", "run.toml", "gen-corpus", "--out", "data"], root)?;
    for out in ["fit1", "fit2"] {
        faultline(&["--config", "run.toml", "--seed", "7", "fit", "--epochs", "2", "--out", out], root)?;
    }
    let fit_files = same_files(&root.join("fit1"), &root.join("fit2"), &["history.csv".into(), "curve.csv".into()])?;
    for out in ["sim1", "sim2"] {
        faultline(&["--config", "run.toml", "simulate", "--checkpoint", "fit1/checkpoint.lidp", "--out", out], root)?;
    }
    let mut names = vec!["pairs.csv".to_string()];
    for e in std::fs::read_dir(root.join("sim1/traces")).map_err(|e| e.to_string())? {
        names.push(format!("traces/{}", e.map_err(|e| e.to_string())?.file_name().to_string_lossy()));
    }
    let sim_files = same_files(&root.join("sim1"), &root.join("sim2"), &names)?;
    check(
        sim_files == 21,
        format!("{fit_files} fit CSVs and {sim_files} simulation files byte-identical across two runs"),
    )
}

fn bench_sweep_completes() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path();
    std::fs::write(
        root.join("bench.toml"),
        "[corpus]\nsequences = 60\n[trainer]\nepochs = 2\nrl_updates_per_epoch = 5\n",
    )
    .map_err(|e| e.to_string())?;
    faultline(&["--config", "bench.toml", "bench", "--sweep", "d=16,32,64", "--out", "b"], root)?;
    let csv = std::fs::read_to_string(root.join("b/bench.csv")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or(format!("no {name} column"));
    let (rps, records, dim) = (col("records_per_second")?, col("records")?, col("dim")?);
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    let rates: Vec<f64> = rows.iter().map(|r| r[rps].parse().unwrap_or(0.0)).collect();
    let dims: Vec<&str> = rows.iter().map(|r| r[dim].as_str()).collect();
    let all_records = rows.iter().all(|r| r[records].parse::<usize>().unwrap_or(0) >= 50_000);
    check(
        rows.len() == 3 && dims == ["16", "32", "64"] && rates.iter().all(|&r| r > 0.0) && all_records,
        format!(
            "{} rows for d = {}, records/s {}",
            rows.len(),
            dims.join(","),
            rates.iter().map(|r| format!("{r:.0}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("attention normalization", attention_rows_sum_to_one),
        ("reasoner oracle equivalence", reasoner_matches_brute_force),
        ("template oracle", template_matches_naive_loops),
        ("gradient fidelity", joint_gradients_match),
        ("beta/KL correctness", beta_kl_correct),
        ("shaping invariants", shaping_invariants),
        ("end-to-end localization", localization_accuracy),
        ("recovery improvement", recovery_improves),
        ("determinism", runs_are_deterministic),
        ("throughput harness", bench_sweep_completes),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
