//! Browser bindings: fuzzy-matching temperature explorer, attention and
//! root-cause inspector over an in-page trained model, and policy shaping.

use faultline::autodiff::special::kl_beta_uniform;
use faultline::config::RunConfig;
use faultline::corpus::{generate, CorpusSpec, SyntheticCorpus};
use faultline::embedding::PrototypeCodebook;
use faultline::env::Environment;
use faultline::pipeline::{init_model, localization, Dataset};
use faultline::planner::shape_policy;
use faultline::reasoner::multi_hop_update;
use faultline::template::template_embed;
use faultline::trainer::{fit, HistoryRow, Model};
use faultline::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

/// Settings that keep in-page training to a few seconds.
fn demo_config(seed: u64, sequences: usize) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        corpus: CorpusSpec {
            sequences,
            seed,
            ..CorpusSpec::default()
        },
        ..RunConfig::default()
    };
    cfg.embedding.dim = 32;
    cfg.codebook.prototypes = 16;
    cfg.codebook.temperature = 0.25;
    cfg.reasoner.init_gain = 8.0;
    cfg.trainer.lr = 0.05;
    cfg.trainer.lambdas.causal = 0.1;
    cfg.trainer.rl_updates_per_epoch = 10;
    cfg.planner.lr = 2e-3;
    cfg
}

#[derive(Debug, Serialize)]
pub struct FuzzyView {
    pub tau: f64,
    /// Prototype weights per position, `T x K`.
    pub weights: Vec<Vec<f64>>,
    pub mean_entropy: f64,
    pub mean_max_weight: f64,
    pub chain: Vec<usize>,
}

#[derive(Debug, Serialize)]
pub struct Inspection {
    pub lines: Vec<String>,
    pub psi: Vec<f64>,
    pub ranking: Vec<usize>,
    /// Attention matrix of the last round, `T x T`.
    pub attention: Vec<Vec<f64>>,
    pub chain: Vec<usize>,
    pub root_cause: usize,
}

#[derive(Debug, Serialize)]
pub struct TrainReport {
    pub history: Vec<HistoryRow>,
    pub best_epoch: usize,
    pub top1: f64,
    pub top3: f64,
    pub validation: usize,
}

#[derive(Debug, Serialize)]
pub struct ShapeView {
    pub base: Vec<f64>,
    pub confidence: Vec<f64>,
    pub shaped: Vec<f64>,
    /// `sum_a KL(Beta(alpha_a, beta_a) || Beta(1, 1))`.
    pub kl: f64,
}

pub struct DemoState {
    cfg: RunConfig,
    corpus: SyntheticCorpus,
    data: Dataset,
    env: Environment,
    model: Model,
}

impl DemoState {
    pub fn new(seed: u64, sequences: usize) -> Result<Self> {
        let cfg = demo_config(seed, sequences);
        cfg.validate()?;
        let corpus = generate(&cfg.corpus)?;
        let data = Dataset::from_synthetic(&corpus, &cfg)?;
        let env = cfg.environment()?;
        let model = init_model(&cfg, &env, data.codebook.dim())?;
        Ok(DemoState {
            cfg,
            corpus,
            data,
            env,
            model,
        })
    }

    pub fn sequences(&self) -> usize {
        self.data.sequences.len()
    }

    fn check(&self, seq: usize) -> Result<()> {
        if seq < self.sequences() {
            Ok(())
        } else {
            Err(Error::Config(format!("sequence {seq} out of range 0..{}", self.sequences())))
        }
    }

    pub fn fuzzy(&self, seq: usize, tau: f64) -> Result<FuzzyView> {
        self.check(seq)?;
        let codebook = PrototypeCodebook::new(self.data.codebook.prototypes.clone(), tau, self.cfg.seed)?;
        let label = &self.data.labels[seq];
        let events = &self.data.vectors[label.start..label.start + label.len];
        let t = template_embed(events, &codebook, &self.cfg.templates.scales, self.cfg.templates.options())?;
        let entropy = |w: &[f64]| -w.iter().filter(|p| **p > 0.0).map(|p| p * p.ln()).sum::<f64>();
        let n = t.weights.len() as f64;
        Ok(FuzzyView {
            tau,
            mean_entropy: t.weights.iter().map(|w| entropy(w)).sum::<f64>() / n,
            mean_max_weight: t.weights.iter().map(|w| w.iter().cloned().fold(0.0, f64::max)).sum::<f64>() / n,
            weights: t.weights,
            chain: label.chain.clone(),
        })
    }

    pub fn train(&mut self, epochs: usize) -> Result<TrainReport> {
        let mut cfg = self.cfg.clone();
        cfg.trainer.epochs = epochs;
        let out = fit(&self.data.sequences, &self.env, self.model.clone(), cfg.planner.hyper(), &cfg.trainer, cfg.seed)?;
        if let Some(msg) = out.diverged {
            return Err(Error::Divergence(msg));
        }
        self.model = out.model;
        let val = self.data.validation_indices(&cfg);
        let (top1, top3) = localization(&self.model, &self.data, &val, 3)?;
        Ok(TrainReport {
            history: out.history,
            best_epoch: out.best_epoch,
            top1,
            top3,
            validation: val.len(),
        })
    }

    pub fn inspect(&self, seq: usize) -> Result<Inspection> {
        self.check(seq)?;
        let s = &self.data.sequences[seq];
        let label = &self.data.labels[seq];
        let hidden = multi_hop_update(&s.initial_states(), &self.model.reasoner_params());
        let scores = self.model.score(&s.templates);
        let attention = hidden
            .graphs
            .last()
            .map(|g| g.matrix.iter_rows().map(|r| r.to_vec()).collect())
            .unwrap_or_default();
        Ok(Inspection {
            lines: self.corpus.lines[label.start..label.start + label.len].to_vec(),
            psi: scores.psi,
            ranking: scores.ranking,
            attention,
            chain: label.chain.clone(),
            root_cause: s.root_cause_index,
        })
    }
}

/// Shapes `base` by confidence priors with means `means` and concentration `strength`.
pub fn shape_view(base: &[f64], means: &[f64], strength: f64) -> Result<ShapeView> {
    if base.len() != means.len() || base.is_empty() {
        return Err(Error::Config("base and means need the same non-zero length".into()));
    }
    if !(strength.is_finite() && strength > 0.0) || means.iter().any(|m| !(*m > 0.0 && *m < 1.0)) || base.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(Error::Config("means must lie in (0, 1), strength and base must be positive".into()));
    }
    let total: f64 = base.iter().sum();
    if total <= 0.0 {
        return Err(Error::Config("base policy has no mass".into()));
    }
    let base: Vec<f64> = base.iter().map(|p| p / total).collect();
    let alpha: Vec<f64> = means.iter().map(|m| m * strength).collect();
    let beta: Vec<f64> = means.iter().map(|m| (1.0 - m) * strength).collect();
    let d = shape_policy(&base, &alpha, &beta);
    Ok(ShapeView {
        kl: alpha.iter().zip(&beta).map(|(a, b)| kl_beta_uniform(*a, *b)).sum(),
        base: d.base,
        confidence: d.confidence_mean,
        shaped: d.shaped,
    })
}

fn to_js<T: Serialize>(r: Result<T>) -> Result<String, JsError> {
    match r {
        Ok(v) => Ok(serde_json::to_string(&v).expect("view serializes")),
        Err(e) => Err(JsError::new(&e.to_string())),
    }
}

#[wasm_bindgen]
pub struct Demo(DemoState);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, sequences: usize) -> Result<Demo, JsError> {
        DemoState::new(seed.into(), sequences).map(Demo).map_err(|e| JsError::new(&e.to_string()))
    }

    pub fn sequences(&self) -> usize {
        self.0.sequences()
    }

    /// JSON [`FuzzyView`].
    pub fn fuzzy(&self, seq: usize, tau: f64) -> Result<String, JsError> {
        to_js(self.0.fuzzy(seq, tau))
    }

    /// JSON [`TrainReport`].
    pub fn train(&mut self, epochs: usize) -> Result<String, JsError> {
        to_js(self.0.train(epochs))
    }

    /// JSON [`Inspection`].
    pub fn inspect(&self, seq: usize) -> Result<String, JsError> {
        to_js(self.0.inspect(seq))
    }
}

/// JSON [`ShapeView`].
#[wasm_bindgen]
pub fn shape(base: &[f64], means: &[f64], strength: f64) -> Result<String, JsError> {
    to_js(shape_view(base, means, strength))
}
