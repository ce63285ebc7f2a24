//! Seedable simulated cluster with one injected fault per episode.
//!
//! Each fault kind has a matching remedial action. Applying it to the
//! faulty service heals that service; once health reaches the recovery
//! threshold the fault clears and the episode ends. Disruptive actions
//! applied anywhere else cost health and reward.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SERVICES: usize = 6;
pub const HORIZON: usize = 32;
pub const RECOVERED_HEALTH: f64 = 0.95;
pub const STEP_COST: f64 = 0.05;
pub const CLEAR_REWARD: f64 = 1.0;
pub const DISRUPTION_COST: f64 = 0.2;
pub const DISRUPTION_DAMAGE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Crash,
    ConfigDrift,
    MemLeak,
    NetPartition,
    DiskFull,
    Overload,
}

impl FaultKind {
    pub const ALL: [FaultKind; 6] = [
        FaultKind::Crash,
        FaultKind::ConfigDrift,
        FaultKind::MemLeak,
        FaultKind::NetPartition,
        FaultKind::DiskFull,
        FaultKind::Overload,
    ];

    pub fn index(self) -> usize {
        FaultKind::ALL.iter().position(|k| *k == self).expect("listed")
    }

    /// The remedy that heals this fault at full rate.
    pub fn remedy(self) -> ActionKind {
        match self {
            FaultKind::Crash => ActionKind::Restart,
            FaultKind::ConfigDrift => ActionKind::Rollback,
            FaultKind::Overload => ActionKind::ScaleUp,
            FaultKind::MemLeak | FaultKind::DiskFull => ActionKind::ClearCache,
            FaultKind::NetPartition => ActionKind::Reroute,
        }
    }

    /// Healing rate multiplier of `action` against this fault (0 when it does not help).
    pub fn heal_factor(self, action: ActionKind) -> f64 {
        if action == self.remedy() {
            1.0
        } else if self == FaultKind::MemLeak && action == ActionKind::Restart {
            0.5
        } else {
            0.0
        }
    }

    fn raises_load(self) -> bool {
        matches!(self, FaultKind::MemLeak | FaultKind::DiskFull | FaultKind::Overload)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub target: usize,
    /// In `(0, 1]`.
    pub severity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Restart,
    Rollback,
    ScaleUp,
    ClearCache,
    Reroute,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::Restart,
        ActionKind::Rollback,
        ActionKind::ScaleUp,
        ActionKind::ClearCache,
        ActionKind::Reroute,
    ];

    /// Actions that interrupt a service when applied without cause.
    pub fn is_disruptive(self) -> bool {
        matches!(self, ActionKind::Restart | ActionKind::Rollback | ActionKind::Reroute)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecoveryAction {
    Apply { kind: ActionKind, target: usize },
    Noop,
}

impl RecoveryAction {
    /// Number of discrete actions for `services` services.
    pub fn count(services: usize) -> usize {
        ActionKind::ALL.len() * services + 1
    }

    /// Actions are laid out kind-major: `kind * services + target`, noop last.
    pub fn from_index(index: usize, services: usize) -> RecoveryAction {
        let n = ActionKind::ALL.len() * services;
        assert!(index <= n, "action index {index} out of range for {services} services");
        if index == n {
            RecoveryAction::Noop
        } else {
            RecoveryAction::Apply {
                kind: ActionKind::ALL[index / services],
                target: index % services,
            }
        }
    }

    pub fn index(self, services: usize) -> usize {
        match self {
            RecoveryAction::Noop => ActionKind::ALL.len() * services,
            RecoveryAction::Apply { kind, target } => {
                let k = ActionKind::ALL.iter().position(|a| *a == kind).expect("listed");
                k * services + target
            }
        }
    }
}

impl fmt::Display for RecoveryAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecoveryAction::Noop => write!(f, "noop"),
            RecoveryAction::Apply { kind, target } => write!(f, "{kind:?}({target})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub service_health: Vec<f64>,
    pub resource_load: Vec<f64>,
    pub active_fault: Option<FaultSpec>,
    pub step_count: usize,
    /// Load before the fault, restored when it clears.
    baseline_load: Vec<f64>,
    done: bool,
}

impl ClusterState {
    pub fn is_terminal(&self) -> bool {
        self.done
    }

    /// `[health; load; one-hot fault kind]`, length `2M + 6`.
    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(2 * self.service_health.len() + FaultKind::ALL.len());
        obs.extend(&self.service_health);
        obs.extend(&self.resource_load);
        let mut onehot = [0.0; 6];
        if let Some(f) = self.active_fault {
            onehot[f.kind.index()] = 1.0;
        }
        obs.extend(onehot);
        obs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: ClusterState,
    pub reward: f64,
    pub done: bool,
    pub cleared: bool,
}

/// Fixed faults keyed by episode seed.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Campaign {
    faults: BTreeMap<u64, FaultSpec>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CampaignRow {
    kind: FaultKind,
    target: usize,
    severity: f64,
    episode: u64,
}

impl Campaign {
    pub fn insert(&mut self, episode: u64, fault: FaultSpec) {
        self.faults.insert(episode, fault);
    }

    pub fn get(&self, episode: u64) -> Option<&FaultSpec> {
        self.faults.get(&episode)
    }

    pub fn len(&self) -> usize {
        self.faults.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faults.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut campaign = Campaign::default();
        for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: CampaignRow = serde_json::from_str(&line)
                .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
            campaign.insert(
                row.episode,
                FaultSpec {
                    kind: row.kind,
                    target: row.target,
                    severity: row.severity,
                },
            );
        }
        Ok(campaign)
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (&episode, f) in &self.faults {
            let row = CampaignRow {
                kind: f.kind,
                target: f.target,
                severity: f.severity,
                episode,
            };
            serde_json::to_writer(&mut out, &row)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    pub services: usize,
    pub horizon: usize,
    pub campaign: Campaign,
}

impl Default for Environment {
    fn default() -> Self {
        Environment::new(DEFAULT_SERVICES, HORIZON)
    }
}

/// Health gained by one remedial step at full rate.
pub fn heal_amount(health: f64, severity: f64) -> f64 {
    0.5 * (1.0 + severity) * (1.0 - health) + 0.25
}

impl Environment {
    pub fn new(services: usize, horizon: usize) -> Self {
        Environment {
            services,
            horizon,
            campaign: Campaign::default(),
        }
    }

    pub fn with_campaign(mut self, campaign: Campaign) -> Result<Self> {
        if let Some((ep, f)) = campaign.faults.iter().find(|(_, f)| f.target >= self.services) {
            return Err(Error::Config(format!(
                "campaign episode {ep} targets service {} but only {} exist",
                f.target, self.services
            )));
        }
        if let Some((ep, _)) = campaign.faults.iter().find(|(_, f)| !(f.severity > 0.0 && f.severity <= 1.0)) {
            return Err(Error::Config(format!("campaign episode {ep} has severity outside (0, 1]")));
        }
        self.campaign = campaign;
        Ok(self)
    }

    pub fn observation_dim(&self) -> usize {
        2 * self.services + FaultKind::ALL.len()
    }

    pub fn action_count(&self) -> usize {
        RecoveryAction::count(self.services)
    }

    /// The fault the seeded schedule injects for an episode.
    pub fn scheduled_fault(&self, seed: u64) -> FaultSpec {
        if let Some(f) = self.campaign.get(seed) {
            return *f;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6661_756c_7473);
        FaultSpec {
            kind: FaultKind::ALL[rng.random_range(0..FaultKind::ALL.len())],
            target: rng.random_range(0..self.services),
            severity: 1.0 - rng.random::<f64>() * 0.9,
        }
    }

    pub fn reset(&self, seed: u64) -> ClusterState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let load: Vec<f64> = (0..self.services).map(|_| rng.random_range(0.2..=0.5)).collect();
        let fault = self.scheduled_fault(seed);
        self.inject(load, fault)
    }

    /// Healthy cluster with `fault` injected.
    pub fn inject(&self, load: Vec<f64>, fault: FaultSpec) -> ClusterState {
        assert!(fault.target < self.services, "fault target {} out of range", fault.target);
        let mut health = vec![1.0; self.services];
        health[fault.target] = 1.0 - fault.severity;
        let mut resource_load = load.clone();
        if fault.kind.raises_load() {
            resource_load[fault.target] = (load[fault.target] + 0.4 * fault.severity).min(1.0);
        }
        ClusterState {
            service_health: health,
            resource_load,
            active_fault: Some(fault),
            step_count: 0,
            baseline_load: load,
            done: false,
        }
    }

    pub fn step(&self, state: &ClusterState, action: RecoveryAction) -> Result<StepOutcome> {
        if state.done {
            return Err(Error::Contract("step called on a terminal state".into()));
        }
        let mut next = state.clone();
        let mut reward = -STEP_COST;
        let mut cleared = false;
        if let RecoveryAction::Apply { kind, target } = action {
            if target >= self.services {
                return Err(Error::Contract(format!("action target {target} out of range")));
            }
            let factor = match next.active_fault {
                Some(f) if f.target == target => f.kind.heal_factor(kind),
                _ => 0.0,
            };
            if factor > 0.0 {
                let f = next.active_fault.expect("matched fault");
                let h = next.service_health[target];
                next.service_health[target] = (h + factor * heal_amount(h, f.severity)).clamp(0.0, 1.0);
                if next.service_health[target] >= RECOVERED_HEALTH {
                    next.active_fault = None;
                    next.resource_load[target] = next.baseline_load[target];
                    reward += CLEAR_REWARD;
                    cleared = true;
                }
            } else if kind.is_disruptive() {
                next.service_health[target] = (next.service_health[target] - DISRUPTION_DAMAGE).clamp(0.0, 1.0);
                reward -= DISRUPTION_COST;
            }
        }
        next.step_count += 1;
        next.done = cleared || next.step_count >= self.horizon;
        let done = next.done;
        Ok(StepOutcome {
            state: next,
            reward,
            done,
            cleared,
        })
    }

    /// The matched action for the active fault, noop when healthy.
    pub fn table_action(state: &ClusterState) -> RecoveryAction {
        match state.active_fault {
            Some(f) => RecoveryAction::Apply {
                kind: f.kind.remedy(),
                target: f.target,
            },
            None => RecoveryAction::Noop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStep {
    pub step: usize,
    pub action: String,
    pub reward: f64,
    pub done: bool,
    pub fault_active: bool,
    pub health: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub seed: u64,
    pub fault: FaultSpec,
    pub steps: Vec<TraceStep>,
    pub cleared: bool,
}

impl Episode {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Steps taken; an uncleared episode counts as the full horizon.
    pub fn steps_to_clear(&self, horizon: usize) -> usize {
        if self.cleared {
            self.steps.len()
        } else {
            horizon
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for s in &self.steps {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Runs one episode, choosing actions with `policy`.
pub fn run_episode<P>(env: &Environment, seed: u64, mut policy: P) -> Result<Episode>
where
    P: FnMut(&ClusterState) -> RecoveryAction,
{
    let mut state = env.reset(seed);
    let fault = state.active_fault.expect("reset injects a fault");
    let mut steps = Vec::new();
    let mut cleared = false;
    while !state.is_terminal() {
        let action = policy(&state);
        let out = env.step(&state, action)?;
        steps.push(TraceStep {
            step: out.state.step_count,
            action: action.to_string(),
            reward: out.reward,
            done: out.done,
            fault_active: out.state.active_fault.is_some(),
            health: out.state.service_health.clone(),
        });
        cleared |= out.cleared;
        state = out.state;
    }
    Ok(Episode {
        seed,
        fault,
        steps,
        cleared,
    })
}
