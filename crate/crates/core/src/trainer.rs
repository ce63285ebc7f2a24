//! Joint training: fault classification, causal-chain contrast, actor-critic
//! and the confidence regularizer.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::corpus::{split, SequenceLabel};
use crate::embedding::{EventVector, PrototypeCodebook};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::planner::{actor_critic_update, rl_loss_on_tape, Hyper, PlannerOptions, PolicyBundle, Rollout, RlTargets, Transition};
use crate::reasoner::{self, forward_on_tape, ReasonerHandles, ReasonerParams, RootCauseScores, NORM_EPS};
use crate::template::{template_embed, TemplateOptions, TemplateSequence};

/// Weights on the causal, RL and KL terms; the fault term has weight one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Lambdas {
    pub causal: f64,
    pub rl: f64,
    pub kl: f64,
}

impl Default for Lambdas {
    fn default() -> Self {
        Lambdas {
            causal: 0.5,
            rl: 1.0,
            kl: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub l_fault: f64,
    pub l_causal: f64,
    pub l_rl: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBundle {
    pub l_fault: f64,
    pub l_causal: f64,
    pub l_rl: f64,
    pub kl: f64,
    pub total: f64,
    pub lambdas: Lambdas,
}

impl LossBundle {
    pub fn recompose(&self) -> f64 {
        self.l_fault + self.lambdas.causal * self.l_causal + self.lambdas.rl * self.l_rl + self.lambdas.kl * self.kl
    }
}

pub fn total_loss(parts: LossParts, lambdas: Lambdas) -> Result<LossBundle> {
    for (name, v) in [
        ("l_fault", parts.l_fault),
        ("l_causal", parts.l_causal),
        ("l_rl", parts.l_rl),
        ("kl", parts.kl),
    ] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("loss term {name} is {v}")));
        }
    }
    let mut bundle = LossBundle {
        l_fault: parts.l_fault,
        l_causal: parts.l_causal,
        l_rl: parts.l_rl,
        kl: parts.kl,
        total: 0.0,
        lambdas,
    };
    bundle.total = bundle.recompose();
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub templates: TemplateSequence,
    pub root_cause_index: usize,
    pub chain: Vec<usize>,
}

impl LabeledSequence {
    pub fn new(templates: TemplateSequence, chain: Vec<usize>) -> Result<Self> {
        let root = *chain
            .first()
            .ok_or_else(|| Error::Contract("fault chain must be non-empty".into()))?;
        if let Some(c) = chain.iter().find(|c| **c >= templates.len()) {
            return Err(Error::Contract(format!(
                "chain index {c} outside sequence of length {}",
                templates.len()
            )));
        }
        Ok(LabeledSequence {
            templates,
            root_cause_index: root,
            chain,
        })
    }

    pub fn len(&self) -> usize {
        self.templates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.templates.is_empty()
    }

    pub fn initial_states(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.templates.templates.iter().map(|t| t.as_slice()).collect();
        Tensor::from_rows(&rows)
    }
}

/// Templates every labeled window of `vectors` into a [`LabeledSequence`].
pub fn build_sequences(
    vectors: &[EventVector],
    labels: &[SequenceLabel],
    codebook: &PrototypeCodebook,
    scales: &[usize],
    options: TemplateOptions,
) -> Result<Vec<LabeledSequence>> {
    labels
        .par_iter()
        .map(|l| {
            let end = l.start + l.len;
            if end > vectors.len() {
                return Err(Error::Config(format!(
                    "sequence {} spans records {}..{end} but the corpus has {}",
                    l.sequence,
                    l.start,
                    vectors.len()
                )));
            }
            let t = template_embed(&vectors[l.start..end], codebook, scales, options)?;
            LabeledSequence::new(t, l.chain.clone())
        })
        .collect()
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Class-balanced binary cross-entropy of root-cause scores.
pub fn fault_loss(psi: &RootCauseScores, label: usize) -> f64 {
    let t = psi.len();
    assert!(label < t, "label {label} out of range for {t} events");
    let pos_weight = (t - 1).max(1) as f64;
    let clamp = |p: f64| p.clamp(f64::MIN_POSITIVE, 1.0);
    let sum: f64 = psi
        .psi
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == label {
                -pos_weight * clamp(*p).ln()
            } else {
                -clamp(1.0 - p).ln()
            }
        })
        .sum();
    sum / t as f64
}

/// Same loss from readout logits; stable where `psi` saturates.
pub fn fault_loss_from_logits(logits: &[f64], label: usize) -> f64 {
    let t = logits.len();
    assert!(label < t, "label {label} out of range for {t} events");
    let pos_weight = (t - 1).max(1) as f64;
    let sum: f64 = logits
        .iter()
        .enumerate()
        .map(|(i, z)| if i == label { -pos_weight * log_sigmoid(*z) } else { -log_sigmoid(-z) })
        .sum();
    sum / t as f64
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_EPS);
    dot / (na * nb)
}

type ContrastLayout = (Vec<(usize, usize)>, Vec<usize>);

/// Adjacent chain pairs and the events outside the chain, when a contrast is possible.
fn contrast_layout(t: usize, chain: &[usize]) -> Option<ContrastLayout> {
    if chain.len() < 2 {
        return None;
    }
    let negatives: Vec<usize> = (0..t).filter(|w| !chain.contains(w)).collect();
    if negatives.is_empty() {
        return None;
    }
    Some((chain.windows(2).map(|p| (p[0], p[1])).collect(), negatives))
}

/// InfoNCE over adjacent chain pairs; `None` when there are no negatives.
pub fn causal_contrast_loss(states: &Tensor, chain: &[usize], temperature: f64) -> Option<f64> {
    let (pairs, negatives) = contrast_layout(states.rows(), chain)?;
    let total: f64 = pairs
        .iter()
        .map(|&(u, v)| {
            let pos = cosine(states.row(u), states.row(v)) / temperature;
            let logits: Vec<f64> = std::iter::once(pos)
                .chain(negatives.iter().map(|w| cosine(states.row(u), states.row(*w)) / temperature))
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            lse - pos
        })
        .sum();
    Some(total / pairs.len() as f64)
}

/// Tape form of [`fault_loss_from_logits`] over a `T x 1` logit column.
pub fn fault_loss_on_tape(tape: &mut Tape, logits: Var, label: usize) -> Var {
    let t = tape.shape(logits)[0];
    assert!(label < t, "label {label} out of range for {t} events");
    let mut w_pos = Tensor::zeros(t, 1);
    w_pos.set(label, 0, (t - 1).max(1) as f64);
    let mut w_neg = Tensor::filled(t, 1, 1.0);
    w_neg.set(label, 0, 0.0);
    let w_pos = tape.constant(w_pos);
    let w_neg = tape.constant(w_neg);
    let ls_pos = tape.log_sigmoid(logits);
    let neg_logits = tape.scale(logits, -1.0);
    let ls_neg = tape.log_sigmoid(neg_logits);
    let a = tape.mul(w_pos, ls_pos);
    let b = tape.mul(w_neg, ls_neg);
    let both = tape.add(a, b);
    let s = tape.sum(both);
    tape.scale(s, -1.0 / t as f64)
}

/// Tape form of [`causal_contrast_loss`].
pub fn causal_loss_on_tape(tape: &mut Tape, states: Var, chain: &[usize], temperature: f64) -> Option<Var> {
    let t = tape.shape(states)[0];
    let (pairs, negatives) = contrast_layout(t, chain)?;
    let normed = tape.row_normalize(states, NORM_EPS);
    let normed_t = tape.transpose(normed);
    let sims = tape.matmul(normed, normed_t);
    let width = 1 + negatives.len();
    let flat = pairs
        .iter()
        .flat_map(|&(u, v)| std::iter::once(u * t + v).chain(negatives.iter().map(move |w| u * t + w)))
        .collect();
    let logits = tape.gather(sims, flat, pairs.len(), width);
    let logits = tape.scale(logits, 1.0 / temperature);
    let logp = tape.log_softmax_row(logits);
    let pos = tape.gather(logp, (0..pairs.len()).map(|r| r * width).collect(), pairs.len(), 1);
    let m = tape.mean(pos);
    Some(tape.scale(m, -1.0))
}

/// Reasoner and recovery policy sharing one parameter set.
#[derive(Debug, Clone)]
pub struct Model {
    pub params: ParamSet,
    pub reasoner: ReasonerHandles,
    pub policy: PolicyBundle,
}

impl Model {
    pub fn new(reasoner: &ReasonerParams, env: &Environment, options: PlannerOptions, seed: u64) -> Result<Self> {
        reasoner.validate()?;
        let mut params = ParamSet::new();
        let handles = reasoner.register(&mut params);
        let policy = PolicyBundle::for_env(&mut params, env, options, seed.wrapping_add(101));
        Ok(Model {
            params,
            reasoner: handles,
            policy,
        })
    }

    pub fn reasoner_params(&self) -> ReasonerParams {
        ReasonerParams::from_params(&self.params, &self.reasoner)
    }

    pub fn reasoner_ids(&self) -> Vec<ParamId> {
        vec![self.reasoner.w_a, self.reasoner.w_psi]
    }

    pub fn score(&self, seq: &TemplateSequence) -> RootCauseScores {
        let rows: Vec<&[f64]> = seq.templates.iter().map(|t| t.as_slice()).collect();
        reasoner::infer(&Tensor::from_rows(&rows), &self.reasoner_params()).1
    }

    fn reasoner_on_tape(&self, tape: &mut Tape, params: &ParamSet, seq: &LabeledSequence) -> reasoner::ReasonerVars {
        let initial = tape.constant(seq.initial_states());
        let w_a = tape.param(params, self.reasoner.w_a);
        let w_psi = tape.param(params, self.reasoner.w_psi);
        forward_on_tape(tape, initial, w_a, w_psi, self.reasoner.rounds, self.reasoner.static_graph)
    }
}

/// Supervised loss of one sequence on a tape: `(l_fault, l_causal)`.
fn sequence_terms(tape: &mut Tape, model: &Model, params: &ParamSet, seq: &LabeledSequence, temperature: f64) -> (Var, Option<Var>) {
    let vars = model.reasoner_on_tape(tape, params, seq);
    let fault = fault_loss_on_tape(tape, vars.logits, seq.root_cause_index);
    let causal = causal_loss_on_tape(tape, vars.final_states, &seq.chain, temperature);
    (fault, causal)
}

/// Tape outputs of the joint objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub l_fault: Var,
    pub l_causal: Var,
    pub l_rl: Var,
    pub kl: Var,
    pub total: Var,
}

/// The full joint objective over a set of sequences and a transition batch.
#[allow(clippy::too_many_arguments)]
pub fn total_loss_on_tape(
    tape: &mut Tape,
    model: &Model,
    params: &ParamSet,
    sequences: &[LabeledSequence],
    batch: &[Transition],
    targets: &RlTargets,
    hyper: &Hyper,
    lambdas: Lambdas,
    temperature: f64,
) -> LossVars {
    let n = sequences.len() as f64;
    let mut fault_terms = Vec::new();
    let mut causal_terms = Vec::new();
    for seq in sequences {
        let (f, c) = sequence_terms(tape, model, params, seq, temperature);
        fault_terms.push(f);
        causal_terms.extend(c);
    }
    let sum_vars = |tape: &mut Tape, vars: &[Var]| {
        vars.iter()
            .copied()
            .reduce(|a, b| tape.add(a, b))
            .unwrap_or_else(|| tape.constant(Tensor::scalar(0.0)))
    };
    let f = sum_vars(tape, &fault_terms);
    let l_fault = tape.scale(f, 1.0 / n);
    let c = sum_vars(tape, &causal_terms);
    let l_causal = tape.scale(c, 1.0 / causal_terms.len().max(1) as f64);
    let rl = rl_loss_on_tape(tape, params, &model.policy, batch, targets, hyper);

    let c = tape.scale(l_causal, lambdas.causal);
    let r = tape.scale(rl.l_rl, lambdas.rl);
    let k = tape.scale(rl.kl, lambdas.kl);
    let t = tape.add(l_fault, c);
    let t = tape.add(t, r);
    let total = tape.add(t, k);
    LossVars {
        l_fault,
        l_causal,
        l_rl: rl.l_rl,
        kl: rl.kl,
        total,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct SupervisedStats {
    pub l_fault: f64,
    pub l_causal: f64,
    /// Sequences whose chain had no negatives.
    pub causal_skipped: usize,
}

struct SeqGrad {
    fault: f64,
    causal: Option<f64>,
    grads: Vec<(ParamId, Tensor)>,
}

fn sequence_grad(model: &Model, seq: &LabeledSequence, lambda_causal: f64, temperature: f64) -> SeqGrad {
    let mut tape = Tape::new();
    let (f, c) = sequence_terms(&mut tape, model, &model.params, seq, temperature);
    let fault = tape.value(f).item();
    let causal = c.map(|c| tape.value(c).item());
    let loss = match c {
        Some(c) => {
            let w = tape.scale(c, lambda_causal);
            tape.add(f, w)
        }
        None => f,
    };
    SeqGrad {
        fault,
        causal,
        grads: tape.backward(loss).param_grads(),
    }
}

/// Mean supervised terms over `sequences` without touching gradients.
pub fn evaluate_supervised(model: &Model, sequences: &[LabeledSequence], temperature: f64) -> SupervisedStats {
    let params = model.reasoner_params();
    let per: Vec<(f64, Option<f64>)> = sequences
        .par_iter()
        .map(|s| {
            let (hidden, _) = reasoner::infer(&s.initial_states(), &params);
            let logits: Vec<f64> = hidden.last().matmul(&Tensor::column(params.w_psi.clone())).into_data();
            (
                fault_loss_from_logits(&logits, s.root_cause_index),
                causal_contrast_loss(hidden.last(), &s.chain, temperature),
            )
        })
        .collect();
    summarize(per.into_iter())
}

fn summarize(per: impl Iterator<Item = (f64, Option<f64>)>) -> SupervisedStats {
    let (mut f, mut c, mut n, mut nc, mut skipped) = (0.0, 0.0, 0usize, 0usize, 0usize);
    for (fault, causal) in per {
        f += fault;
        n += 1;
        match causal {
            Some(v) => {
                c += v;
                nc += 1;
            }
            None => skipped += 1,
        }
    }
    SupervisedStats {
        l_fault: f / n.max(1) as f64,
        l_causal: c / nc.max(1) as f64,
        causal_skipped: skipped,
    }
}

/// One optimizer step on `l_fault + lambda_causal * l_causal` averaged over `batch`.
///
/// Per-sequence gradients run in parallel and are reduced in batch order.
pub fn supervised_step(model: &mut Model, batch: &[LabeledSequence], opt: &mut Adam, lambda_causal: f64, temperature: f64) -> SupervisedStats {
    let per: Vec<SeqGrad> = batch
        .par_iter()
        .map(|s| sequence_grad(model, s, lambda_causal, temperature))
        .collect();
    let scale = 1.0 / batch.len().max(1) as f64;
    model.params.zero_grad();
    for g in &per {
        let scaled: Vec<(ParamId, Tensor)> = g.grads.iter().map(|(id, t)| (*id, t.map(|v| v * scale))).collect();
        model.params.accumulate(&scaled);
    }
    opt.step(&mut model.params);
    summarize(per.iter().map(|g| (g.fault, g.causal)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub lambdas: Lambdas,
    /// Adam step size for the reasoner parameters.
    pub lr: f64,
    pub batch_sequences: usize,
    pub val_fraction: f64,
    pub causal_temperature: f64,
    /// Actor-critic updates in each epoch's rollout phase.
    pub rl_updates_per_epoch: usize,
    pub divergence_threshold: f64,
    /// Adam denominator floor for the reasoner optimizer.
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            patience: 5,
            lambdas: Lambdas::default(),
            lr: 1e-2,
            batch_sequences: 16,
            val_fraction: 0.2,
            causal_temperature: 0.1,
            rl_updates_per_epoch: 100,
            divergence_threshold: 1e6,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.epochs == 0 {
            return bad("trainer.epochs must be positive");
        }
        if self.batch_sequences == 0 {
            return bad("trainer.batch_sequences must be positive");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("trainer.val_fraction must be in [0, 1)");
        }
        if !(self.lr > 0.0 && self.causal_temperature > 0.0) {
            return bad("trainer.lr and trainer.causal_temperature must be positive");
        }
        let l = self.lambdas;
        if [l.causal, l.rl, l.kl].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("trainer.lambdas must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryRow {
    pub epoch: usize,
    pub l_fault: f64,
    pub l_causal: f64,
    pub l_rl: f64,
    pub kl: f64,
    pub total: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurveRow {
    pub episode: usize,
    #[serde(rename = "return")]
    pub ret: f64,
    pub steps: usize,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub kl: f64,
}

pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Artifact(format!("CSV write failed: {e}")))?;
    }
    w.flush().map_err(|e| Error::Artifact(format!("CSV write failed: {e}")))
}

/// Actor-critic training state carried across epochs.
#[derive(Debug, Clone)]
pub struct RlPhase {
    pub rollout: Rollout,
    pub opt: Adam,
    pub hyper: Hyper,
    rng: ChaCha8Rng,
    episodes: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RlPhaseStats {
    pub l_rl: f64,
    pub kl: f64,
}

impl RlPhase {
    /// Rollout episodes use seeds from `first_seed` upward.
    pub fn new(env: Environment, model: &Model, hyper: Hyper, first_seed: u64, seed: u64) -> Self {
        RlPhase {
            rollout: Rollout::new(env, first_seed),
            opt: Adam::new(&model.params, model.policy.ids(), hyper.lr),
            hyper,
            rng: ChaCha8Rng::seed_from_u64(seed),
            episodes: 0,
        }
    }

    /// Runs `updates` actor-critic updates on `lambdas.rl * L_RL + lambdas.kl * KL`.
    pub fn run(&mut self, model: &mut Model, updates: usize, lambdas: Lambdas, curve: &mut Vec<CurveRow>) -> Result<RlPhaseStats> {
        let mut stats = RlPhaseStats::default();
        for _ in 0..updates {
            let (batch, finished) = self
                .rollout
                .collect(&model.policy, &model.params, self.hyper.batch_size, &mut self.rng)?;
            model.params.zero_grad_of(self.opt.group());
            let losses = actor_critic_update(&batch, &model.policy, &mut model.params, &self.hyper, lambdas.rl, lambdas.kl)?;
            self.opt.step(&mut model.params);
            stats.l_rl += losses.l_rl;
            stats.kl += losses.kl;
            for ep in finished {
                curve.push(CurveRow {
                    episode: self.episodes,
                    ret: ep.total_reward,
                    steps: ep.steps,
                    actor_loss: losses.actor,
                    critic_loss: losses.critic,
                    kl: losses.kl,
                });
                self.episodes += 1;
            }
        }
        if updates > 0 {
            stats.l_rl /= updates as f64;
            stats.kl /= updates as f64;
        }
        Ok(stats)
    }
}

/// First seed of training rollouts, far from evaluation seeds.
pub const TRAIN_SEED_BASE: u64 = 1 << 40;

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Parameters of the best validation epoch, or the last good epoch after divergence.
    pub model: Model,
    pub history: Vec<HistoryRow>,
    pub curve: Vec<CurveRow>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub diverged: Option<String>,
    pub causal_skipped: usize,
    pub train_size: usize,
    pub val_size: usize,
}

impl FitOutcome {
    pub fn best_val(&self) -> Option<f64> {
        self.history.iter().find(|h| h.epoch == self.best_epoch).map(|h| h.val_total)
    }
}

/// Trains `model` with an 80/20 seeded split of `dataset` and early stopping on validation loss.
pub fn fit(dataset: &[LabeledSequence], env: &Environment, mut model: Model, hyper: Hyper, cfg: &TrainConfig, seed: u64) -> Result<FitOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let (train, val) = split(dataset, cfg.val_fraction, seed);
    let val_set = if val.is_empty() { train.clone() } else { val };
    let lambdas = cfg.lambdas;
    let mut sup_opt = Adam::new(&model.params, model.reasoner_ids(), cfg.lr);
    sup_opt.eps = cfg.adam_eps;
    let mut rl = RlPhase::new(env.clone(), &model, hyper, TRAIN_SEED_BASE.wrapping_add(seed << 20), seed);

    let mut history = Vec::new();
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, ParamSet)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut diverged = None;
    let mut causal_skipped = 0;
    let mut last_good = model.params.clone();

    for epoch in 1..=cfg.epochs {
        let epoch_result = (|| -> Result<HistoryRow> {
            let (mut f, mut c, mut n) = (0.0, 0.0, 0usize);
            let mut skipped = 0;
            for batch in train.chunks(cfg.batch_sequences) {
                let s = supervised_step(&mut model, batch, &mut sup_opt, lambdas.causal, cfg.causal_temperature);
                let w = batch.len();
                f += s.l_fault * w as f64;
                c += s.l_causal * w as f64;
                n += w;
                skipped += s.causal_skipped;
            }
            causal_skipped = skipped;
            let rl_stats = rl.run(&mut model, cfg.rl_updates_per_epoch, lambdas, &mut curve)?;
            let parts = LossParts {
                l_fault: f / n as f64,
                l_causal: c / n as f64,
                l_rl: rl_stats.l_rl,
                kl: rl_stats.kl,
            };
            let bundle = total_loss(parts, lambdas)?;
            let v = evaluate_supervised(&model, &val_set, cfg.causal_temperature);
            let val_total = v.l_fault + lambdas.causal * v.l_causal;
            if !val_total.is_finite() {
                return Err(Error::Divergence(format!("validation loss is {val_total}")));
            }
            if bundle.total.abs() > cfg.divergence_threshold || val_total.abs() > cfg.divergence_threshold {
                return Err(Error::Divergence(format!(
                    "loss exceeded {:e}: total {:.6e}, validation {:.6e}",
                    cfg.divergence_threshold, bundle.total, val_total
                )));
            }
            Ok(HistoryRow {
                epoch,
                l_fault: bundle.l_fault,
                l_causal: bundle.l_causal,
                l_rl: bundle.l_rl,
                kl: bundle.kl,
                total: bundle.total,
                val_total,
            })
        })();

        let row = match epoch_result {
            Ok(row) => row,
            Err(Error::Divergence(msg)) => {
                diverged = Some(format!("epoch {epoch}: {msg}"));
                model.params = last_good.clone();
                break;
            }
            Err(e) => return Err(e),
        };
        history.push(row);
        last_good = model.params.clone();
        if best.as_ref().is_none_or(|(v, _, _)| row.val_total < *v) {
            best = Some((row.val_total, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((_, epoch, params)) if diverged.is_none() => {
            model.params = params;
            epoch
        }
        Some((_, epoch, _)) => epoch,
        None => 0,
    };
    Ok(FitOutcome {
        model,
        history,
        curve,
        best_epoch,
        stopped_early,
        diverged,
        causal_skipped,
        train_size: train.len(),
        val_size: val_set.len(),
    })
}
