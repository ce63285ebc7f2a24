//! Actor-critic recovery policy with Beta confidence shaping.
//!
//! A prior network maps each observation to a `Beta(alpha_a, beta_a)` per
//! action. The policy that acts is the actor's distribution reweighted by
//! the Beta means and renormalized.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::special::kl_beta_uniform;
use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::env::{ClusterState, Environment, RecoveryAction};
use crate::error::{Error, Result};
use crate::nn::Mlp;

pub const HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub lr: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub batch_size: usize,
    pub critic_coef: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            lr: 5e-5,
            gamma: 0.99,
            entropy_coef: 0.01,
            batch_size: 64,
            critic_coef: 0.5,
        }
    }
}

/// Which loss terms train the confidence prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorGrad {
    Rl,
    Kl,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerOptions {
    /// When off, every confidence mean is fixed at 0.5 and the shaped policy is the base policy.
    pub shaping: bool,
    /// Use the shaped distribution in the policy-gradient term (otherwise the base one).
    pub shape_in_loss: bool,
    pub prior_grad: PriorGrad,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        PlannerOptions {
            shaping: true,
            shape_in_loss: true,
            prior_grad: PriorGrad::Both,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyBundle {
    pub actor: Mlp,
    pub critic: Mlp,
    pub prior: Mlp,
    pub obs_dim: usize,
    pub actions: usize,
    pub options: PlannerOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapedDistribution {
    pub base: Vec<f64>,
    pub confidence_mean: Vec<f64>,
    pub shaped: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMode {
    Sample,
    Greedy,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

/// Maps `2A` raw prior outputs to `(alpha, beta)` via `softplus + 1`.
pub fn beta_params_from_raw(raw: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let a = raw.len() / 2;
    let alpha = raw[..a].iter().map(|r| softplus(*r) + 1.0).collect();
    let beta = raw[a..].iter().map(|r| softplus(*r) + 1.0).collect();
    (alpha, beta)
}

pub fn beta_mean(alpha: f64, beta: f64) -> f64 {
    alpha / (alpha + beta)
}

/// Reweights `base` by the Beta means and renormalizes.
pub fn shape_policy(base: &[f64], alpha: &[f64], beta: &[f64]) -> ShapedDistribution {
    let confidence_mean: Vec<f64> = alpha.iter().zip(beta).map(|(a, b)| beta_mean(*a, *b)).collect();
    let unnorm: Vec<f64> = base.iter().zip(&confidence_mean).map(|(p, m)| p * m).collect();
    let z: f64 = unnorm.iter().sum();
    assert!(z > 0.0, "shaped policy has zero mass");
    ShapedDistribution {
        base: base.to_vec(),
        confidence_mean,
        shaped: unnorm.iter().map(|u| u / z).collect(),
    }
}

pub fn select_action<R: Rng>(dist: &ShapedDistribution, mode: SelectMode, rng: &mut R) -> usize {
    match mode {
        SelectMode::Greedy => {
            let mut best = 0;
            for (i, p) in dist.shaped.iter().enumerate() {
                if *p > dist.shaped[best] {
                    best = i;
                }
            }
            best
        }
        SelectMode::Sample => {
            let mut u = rng.random::<f64>();
            let mut last_nonzero = 0;
            for (i, p) in dist.shaped.iter().enumerate() {
                if *p > 0.0 {
                    last_nonzero = i;
                    if u < *p {
                        return i;
                    }
                    u -= p;
                }
            }
            last_nonzero
        }
    }
}

/// `sum_a KL(Beta(alpha_a, beta_a) || Beta(1, 1))`.
pub fn kl_conf_uniform(alpha: &[f64], beta: &[f64]) -> Result<f64> {
    if let Some((a, b)) = alpha.iter().zip(beta).find(|(a, b)| !(**a > 0.0 && **b > 0.0)) {
        return Err(Error::Contract(format!("Beta parameters must be positive, got ({a}, {b})")));
    }
    Ok(alpha.iter().zip(beta).map(|(a, b)| kl_beta_uniform(*a, *b)).sum())
}

impl PolicyBundle {
    pub fn new(params: &mut ParamSet, obs_dim: usize, actions: usize, options: PlannerOptions, seed: u64) -> Self {
        PolicyBundle {
            actor: Mlp::new(params, "planner.actor", obs_dim, HIDDEN, actions, 0.1, seed),
            critic: Mlp::new(params, "planner.critic", obs_dim, HIDDEN, 1, 1.0, seed.wrapping_add(1)),
            prior: Mlp::new(params, "planner.prior", obs_dim, HIDDEN, 2 * actions, 0.1, seed.wrapping_add(2)),
            obs_dim,
            actions,
            options,
        }
    }

    pub fn for_env(params: &mut ParamSet, env: &Environment, options: PlannerOptions, seed: u64) -> Self {
        PolicyBundle::new(params, env.observation_dim(), env.action_count(), options, seed)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.actor.ids(), self.critic.ids(), self.prior.ids()].concat()
    }

    fn check_obs(&self, obs: &[f64]) {
        assert!(
            obs.len() == self.obs_dim,
            "observation has dimension {}, policy expects {}",
            obs.len(),
            self.obs_dim
        );
    }

    pub fn confidence_prior(&self, params: &ParamSet, obs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.check_obs(obs);
        let raw = self.prior.forward(params, &Tensor::row_vector(obs.to_vec()));
        beta_params_from_raw(raw.data())
    }

    pub fn base_policy(&self, params: &ParamSet, obs: &[f64]) -> Vec<f64> {
        self.check_obs(obs);
        let logits = self.actor.forward(params, &Tensor::row_vector(obs.to_vec()));
        softmax(logits.data())
    }

    pub fn distribution(&self, params: &ParamSet, obs: &[f64]) -> ShapedDistribution {
        let base = self.base_policy(params, obs);
        if self.options.shaping {
            let (alpha, beta) = self.confidence_prior(params, obs);
            shape_policy(&base, &alpha, &beta)
        } else {
            let ones = vec![1.0; self.actions];
            shape_policy(&base, &ones, &ones)
        }
    }

    pub fn value(&self, params: &ParamSet, obs: &[f64]) -> f64 {
        self.critic.forward(params, &Tensor::row_vector(obs.to_vec())).item()
    }

    pub fn act<R: Rng>(&self, params: &ParamSet, state: &ClusterState, services: usize, mode: SelectMode, rng: &mut R) -> RecoveryAction {
        let dist = self.distribution(params, &state.observation());
        RecoveryAction::from_index(select_action(&dist, mode, rng), services)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Quantities held fixed while differentiating the actor-critic objective.
#[derive(Debug, Clone, PartialEq)]
pub struct RlTargets {
    /// `r + gamma * V(s') * (1 - done)`.
    pub td_target: Vec<f64>,
    /// `td_target - V(s)`.
    pub advantage: Vec<f64>,
}

pub fn rl_targets(bundle: &PolicyBundle, params: &ParamSet, batch: &[Transition], gamma: f64) -> RlTargets {
    let obs = Tensor::from_rows(&batch.iter().map(|t| t.obs.as_slice()).collect::<Vec<_>>());
    let next = Tensor::from_rows(&batch.iter().map(|t| t.next_obs.as_slice()).collect::<Vec<_>>());
    let v = bundle.critic.forward(params, &obs);
    let v_next = bundle.critic.forward(params, &next);
    let td_target: Vec<f64> = batch
        .iter()
        .enumerate()
        .map(|(i, t)| t.reward + if t.done { 0.0 } else { gamma * v_next.get(i, 0) })
        .collect();
    let advantage = td_target.iter().enumerate().map(|(i, y)| y - v.get(i, 0)).collect();
    RlTargets { td_target, advantage }
}

#[derive(Debug, Clone, Copy)]
pub struct RlVars {
    pub l_rl: Var,
    pub actor: Var,
    pub critic: Var,
    pub entropy: Var,
    /// Mean over states and actions of `KL(Beta || Beta(1, 1))`.
    pub kl: Var,
}

/// Records `L_RL` and the confidence KL for a batch.
pub fn rl_loss_on_tape(tape: &mut Tape, params: &ParamSet, bundle: &PolicyBundle, batch: &[Transition], targets: &RlTargets, hyper: &Hyper) -> RlVars {
    let n = batch.len();
    let a = bundle.actions;
    let obs = tape.constant(Tensor::from_rows(&batch.iter().map(|t| t.obs.as_slice()).collect::<Vec<_>>()));
    let logits = bundle.actor.forward_on_tape(tape, params, obs);
    let opts = bundle.options;

    let (ln_mean, kl) = if opts.shaping {
        let raw = bundle.prior.forward_on_tape(tape, params, obs);
        let alpha_idx = (0..n).flat_map(|r| (0..a).map(move |c| r * 2 * a + c)).collect();
        let beta_idx = (0..n).flat_map(|r| (0..a).map(move |c| r * 2 * a + a + c)).collect();
        let alpha_raw = tape.gather(raw, alpha_idx, n, a);
        let beta_raw = tape.gather(raw, beta_idx, n, a);
        let alpha = tape.softplus(alpha_raw);
        let alpha = tape.add_scalar(alpha, 1.0);
        let beta = tape.softplus(beta_raw);
        let beta = tape.add_scalar(beta, 1.0);
        let total = tape.add(alpha, beta);
        let ln_a = tape.ln(alpha);
        let ln_t = tape.ln(total);
        let mut ln_mean = tape.sub(ln_a, ln_t);
        if opts.prior_grad == PriorGrad::Kl {
            ln_mean = tape.detach(ln_mean);
        }
        let (ka, kb) = if opts.prior_grad == PriorGrad::Rl {
            (tape.detach(alpha), tape.detach(beta))
        } else {
            (alpha, beta)
        };
        let kl_each = tape.kl_beta_uniform(ka, kb);
        let kl = tape.mean(kl_each);
        (ln_mean, kl)
    } else {
        (tape.constant(Tensor::filled(n, a, 0.5f64.ln())), tape.constant(Tensor::scalar(0.0)))
    };

    let policy_logits = if opts.shape_in_loss { tape.add(logits, ln_mean) } else { logits };
    let logp = tape.log_softmax_row(policy_logits);
    let p = tape.exp(logp);
    let plogp = tape.mul(p, logp);
    let neg_entropy_sum = tape.sum(plogp);
    let entropy = tape.scale(neg_entropy_sum, -1.0 / n as f64);

    let chosen = tape.gather(logp, batch.iter().enumerate().map(|(i, t)| i * a + t.action).collect(), 1, n);
    let adv = tape.constant(Tensor::row_vector(targets.advantage.clone()));
    let weighted = tape.mul(chosen, adv);
    let pg = tape.mean(weighted);
    let pg = tape.scale(pg, -1.0);
    let ent_term = tape.scale(entropy, -hyper.entropy_coef);
    let actor = tape.add(pg, ent_term);

    let values = bundle.critic.forward_on_tape(tape, params, obs);
    let target = tape.constant(Tensor::column(targets.td_target.clone()));
    let diff = tape.sub(target, values);
    let sq = tape.mul(diff, diff);
    let critic = tape.mean(sq);

    let critic_term = tape.scale(critic, hyper.critic_coef);
    let l_rl = tape.add(actor, critic_term);
    RlVars {
        l_rl,
        actor,
        critic,
        entropy,
        kl,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RlLosses {
    pub actor: f64,
    pub critic: f64,
    pub entropy: f64,
    pub l_rl: f64,
    pub kl: f64,
}

/// Accumulates gradients of `rl_weight * L_RL + kl_weight * KL` into `params`.
pub fn actor_critic_update(
    batch: &[Transition],
    bundle: &PolicyBundle,
    params: &mut ParamSet,
    hyper: &Hyper,
    rl_weight: f64,
    kl_weight: f64,
) -> Result<RlLosses> {
    if batch.is_empty() {
        return Err(Error::Contract("actor-critic update needs at least one transition".into()));
    }
    let targets = rl_targets(bundle, params, batch, hyper.gamma);
    let mut tape = Tape::new();
    let vars = rl_loss_on_tape(&mut tape, params, bundle, batch, &targets, hyper);
    let losses = RlLosses {
        actor: tape.value(vars.actor).item(),
        critic: tape.value(vars.critic).item(),
        entropy: tape.value(vars.entropy).item(),
        l_rl: tape.value(vars.l_rl).item(),
        kl: tape.value(vars.kl).item(),
    };
    if ![losses.actor, losses.critic, losses.entropy, losses.kl].iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite actor-critic loss {losses:?} on a batch of {} transitions (mean advantage {:.4e})",
            batch.len(),
            targets.advantage.iter().sum::<f64>() / batch.len() as f64
        )));
    }
    let rl = tape.scale(vars.l_rl, rl_weight);
    let kl = tape.scale(vars.kl, kl_weight);
    let total = tape.add(rl, kl);
    tape.backward_into(total, params);
    Ok(losses)
}

/// Statistics of an episode finished during rollout collection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpisodeStats {
    pub seed: u64,
    pub total_reward: f64,
    pub steps: usize,
    pub cleared: bool,
}

/// Sequential rollout worker that carries episodes across batches.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub env: Environment,
    state: ClusterState,
    seed: u64,
    next_seed: u64,
    episode_reward: f64,
}

impl Rollout {
    /// Episodes use consecutive seeds starting at `first_seed`.
    pub fn new(env: Environment, first_seed: u64) -> Self {
        let state = env.reset(first_seed);
        Rollout {
            env,
            state,
            seed: first_seed,
            next_seed: first_seed + 1,
            episode_reward: 0.0,
        }
    }

    pub fn collect<R: Rng>(
        &mut self,
        bundle: &PolicyBundle,
        params: &ParamSet,
        count: usize,
        rng: &mut R,
    ) -> Result<(Vec<Transition>, Vec<EpisodeStats>)> {
        let mut batch = Vec::with_capacity(count);
        let mut finished = Vec::new();
        while batch.len() < count {
            let obs = self.state.observation();
            let dist = bundle.distribution(params, &obs);
            let action = select_action(&dist, SelectMode::Sample, rng);
            let out = self.env.step(&self.state, RecoveryAction::from_index(action, self.env.services))?;
            self.episode_reward += out.reward;
            batch.push(Transition {
                obs,
                action,
                reward: out.reward,
                next_obs: out.state.observation(),
                done: out.done,
            });
            if out.done {
                finished.push(EpisodeStats {
                    seed: self.seed,
                    total_reward: self.episode_reward,
                    steps: out.state.step_count,
                    cleared: out.cleared,
                });
                self.seed = self.next_seed;
                self.next_seed += 1;
                self.state = self.env.reset(self.seed);
                self.episode_reward = 0.0;
            } else {
                self.state = out.state;
            }
        }
        Ok((batch, finished))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::nn::Adam;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn prior_at_zero_raw() {
        let (a, b) = beta_params_from_raw(&[0.0, 0.0]);
        assert!((a[0] - (1.0 + 2f64.ln())).abs() < 1e-15);
        assert!((a[0] - 1.6931).abs() < 1e-4);
        assert_eq!(a, b);
        assert_eq!(beta_mean(a[0], b[0]), 0.5);
        assert_eq!(beta_mean(2.0, 2.0), 0.5);
        assert_eq!(beta_mean(3.0, 1.0), 0.75);
    }

    #[test]
    fn shaping_cases() {
        let base = [0.2, 0.5, 0.3];
        let s = shape_policy(&base, &[2.0; 3], &[3.0; 3]);
        for (x, y) in s.shaped.iter().zip(base) {
            assert!((x - y).abs() < 1e-12);
        }
        let s = shape_policy(&[0.5, 0.5], &[3.0, 1.0], &[1.0, 3.0]);
        assert!((s.shaped[0] - 0.75).abs() < 1e-15 && (s.shaped[1] - 0.25).abs() < 1e-15);
        let s = shape_policy(&[1.0, 0.0], &[1.5, 4.0], &[2.0, 1.2]);
        assert_eq!(s.shaped, vec![1.0, 0.0]);
    }

    #[test]
    fn greedy_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = |p: Vec<f64>| ShapedDistribution {
            base: p.clone(),
            confidence_mean: vec![0.5; p.len()],
            shaped: p,
        };
        assert_eq!(select_action(&d(vec![0.2, 0.5, 0.3]), SelectMode::Greedy, &mut rng), 1);
        assert_eq!(select_action(&d(vec![0.5, 0.5]), SelectMode::Greedy, &mut rng), 0);
    }

    #[test]
    fn sampling_frequencies_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dist = shape_policy(&[0.1, 0.6, 0.3], &[2.0, 1.5, 4.0], &[2.0, 3.0, 1.0]);
        let mut counts = [0usize; 3];
        let n = 100_000;
        for _ in 0..n {
            counts[select_action(&dist, SelectMode::Sample, &mut rng)] += 1;
        }
        for (c, p) in counts.iter().zip(&dist.shaped) {
            assert!((*c as f64 / n as f64 - p).abs() < 1e-2);
        }
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_conf_uniform(&[1.0], &[1.0]).unwrap(), 0.0);
        assert!(kl_conf_uniform(&[0.0], &[1.0]).is_err());
        for a in [0.5, 1.0, 2.0, 3.0, 5.0] {
            for b in [0.5, 1.0, 2.0, 3.0, 5.0] {
                assert!(kl_conf_uniform(&[a], &[b]).unwrap() >= 0.0);
            }
        }
    }

    fn toy_bundle(params: &mut ParamSet, obs: usize, actions: usize) -> PolicyBundle {
        PolicyBundle::new(params, obs, actions, PlannerOptions::default(), 3)
    }

    #[test]
    fn single_terminal_transition_critic_loss() {
        let mut params = ParamSet::new();
        let bundle = toy_bundle(&mut params, 2, 2);
        // zero critic output
        for id in bundle.critic.ids() {
            params.value_mut(id).data_mut().fill(0.0);
        }
        let batch = vec![Transition {
            obs: vec![0.3, 0.1],
            action: 1,
            reward: 1.0,
            next_obs: vec![0.0, 0.0],
            done: true,
        }];
        let losses = actor_critic_update(&batch, &bundle, &mut params, &Hyper::default(), 1.0, 0.0).unwrap();
        assert_eq!(losses.critic, 1.0);
    }

    #[test]
    fn zero_advantage_leaves_entropy_gradient_only() {
        let mut params = ParamSet::new();
        let bundle = toy_bundle(&mut params, 2, 3);
        let batch: Vec<Transition> = (0..4)
            .map(|i| Transition {
                obs: vec![i as f64 * 0.1, 1.0],
                action: i % 3,
                reward: 0.0,
                next_obs: vec![0.0, 0.0],
                done: true,
            })
            .collect();
        let hyper = Hyper::default();
        let targets = RlTargets {
            td_target: vec![0.0; 4],
            advantage: vec![0.0; 4],
        };
        let mut tape = Tape::new();
        let vars = rl_loss_on_tape(&mut tape, &params, &bundle, &batch, &targets, &hyper);
        let actor_grads = tape.backward(vars.actor).param_grads();

        let mut tape = Tape::new();
        let vars = rl_loss_on_tape(&mut tape, &params, &bundle, &batch, &targets, &hyper);
        let ent = tape.scale(vars.entropy, -hyper.entropy_coef);
        let ent_grads = tape.backward(ent).param_grads();
        assert_eq!(actor_grads.len(), ent_grads.len());
        for ((ia, ga), (ib, gb)) in actor_grads.iter().zip(&ent_grads) {
            assert_eq!(ia, ib);
            for (x, y) in ga.data().iter().zip(gb.data()) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn rl_objective_gradients_match_finite_differences() {
        for prior_grad in [PriorGrad::Both, PriorGrad::Rl, PriorGrad::Kl] {
            let mut params = ParamSet::new();
            let options = PlannerOptions { prior_grad, ..Default::default() };
            let bundle = PolicyBundle::new(&mut params, 3, 4, options, 8);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let batch: Vec<Transition> = (0..5)
                .map(|i| Transition {
                    obs: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    action: i % 4,
                    reward: rng.random_range(-1.0..1.0),
                    next_obs: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                    done: i == 4,
                })
                .collect();
            let hyper = Hyper::default();
            let targets = rl_targets(&bundle, &params, &batch, hyper.gamma);
            let report = check_gradients(
                |tape, p| {
                    let v = rl_loss_on_tape(tape, p, &bundle, &batch, &targets, &hyper);
                    // stop-gradients only agree with finite differences on the undetached term
                    match prior_grad {
                        PriorGrad::Both => {
                            let kl = tape.scale(v.kl, 0.3);
                            tape.add(v.l_rl, kl)
                        }
                        PriorGrad::Rl => v.l_rl,
                        PriorGrad::Kl => v.kl,
                    }
                },
                &params,
                1e-4,
            );
            assert!(report.max_rel_error < 1e-4, "{prior_grad:?}: {report:?}");
        }
    }

    #[test]
    fn two_armed_bandit_prefers_paying_arm() {
        let mut params = ParamSet::new();
        let bundle = toy_bundle(&mut params, 1, 2);
        let hyper = Hyper::default();
        let mut opt = Adam::new(&params, bundle.ids(), hyper.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let obs = vec![1.0];
        let start = bundle.distribution(&params, &obs).shaped[0];
        for _ in 0..500 {
            let batch: Vec<Transition> = (0..hyper.batch_size)
                .map(|_| {
                    let action = select_action(&bundle.distribution(&params, &obs), SelectMode::Sample, &mut rng);
                    Transition {
                        obs: obs.clone(),
                        action,
                        reward: if action == 0 { 1.0 } else { 0.0 },
                        next_obs: obs.clone(),
                        done: true,
                    }
                })
                .collect();
            actor_critic_update(&batch, &bundle, &mut params, &hyper, 1.0, 0.0).unwrap();
            opt.step(&mut params);
        }
        let dist = bundle.distribution(&params, &obs);
        assert_eq!(select_action(&dist, SelectMode::Greedy, &mut rng), 0);
        assert!(dist.shaped[0] > start + 0.05, "{} -> {}", start, dist.shaped[0]);
    }

    #[test]
    fn rollout_is_deterministic() {
        let env = Environment::default();
        let mut params = ParamSet::new();
        let bundle = PolicyBundle::for_env(&mut params, &env, PlannerOptions::default(), 0);
        let run = || {
            let mut r = Rollout::new(env.clone(), 100);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            r.collect(&bundle, &params, 100, &mut rng).unwrap()
        };
        let (a, ea) = run();
        let (b, eb) = run();
        assert_eq!(a, b);
        assert_eq!(ea, eb);
        assert!(!ea.is_empty());
    }
}
