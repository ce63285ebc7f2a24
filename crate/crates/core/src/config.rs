//! Sectioned TOML run configuration with documented defaults.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusSpec;
use crate::embedding::{DEFAULT_DIM, DEFAULT_PROTOTYPES, DEFAULT_TEMPERATURE};
use crate::env::{Environment, DEFAULT_SERVICES, HORIZON};
use crate::error::{Error, Result};
use crate::ingest::HeaderFormat;
use crate::planner::{Hyper, PlannerOptions, PriorGrad};
use crate::reasoner::DEFAULT_ROUNDS;
use crate::template::TemplateOptions;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: DataConfig,
    /// Extra header formats by name; `standard` and `hdfs` are built in.
    pub formats: BTreeMap<String, HeaderFormat>,
    pub corpus: CorpusSpec,
    pub embedding: EmbeddingConfig,
    pub codebook: CodebookConfig,
    pub templates: TemplatesConfig,
    pub reasoner: ReasonerConfig,
    pub planner: PlannerConfig,
    pub env: EnvConfig,
    pub trainer: TrainConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 13,
            out: PathBuf::from("out"),
            data: DataConfig::default(),
            formats: BTreeMap::new(),
            corpus: CorpusSpec::default(),
            embedding: EmbeddingConfig::default(),
            codebook: CodebookConfig::default(),
            templates: TemplatesConfig::default(),
            reasoner: ReasonerConfig::default(),
            planner: PlannerConfig::default(),
            env: EnvConfig::default(),
            trainer: TrainConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Log files, read in order.
    pub corpus: Vec<PathBuf>,
    /// Root-cause labels (JSONL) for the corpus.
    pub labels: Option<PathBuf>,
    /// Name of the header format.
    pub format: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingConfig {
    pub dim: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig { dim: DEFAULT_DIM }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitOn {
    Events,
    WindowMeans,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodebookConfig {
    pub prototypes: usize,
    pub temperature: f64,
    pub fit_on: FitOn,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            prototypes: DEFAULT_PROTOTYPES,
            temperature: DEFAULT_TEMPERATURE,
            fit_on: FitOn::Events,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplatesConfig {
    pub scales: Vec<usize>,
    pub scale_normalize: bool,
}

impl Default for TemplatesConfig {
    fn default() -> Self {
        TemplatesConfig {
            scales: vec![3, 5, 7],
            scale_normalize: true,
        }
    }
}

impl TemplatesConfig {
    pub fn options(&self) -> TemplateOptions {
        TemplateOptions {
            scale_normalize: self.scale_normalize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReasonerConfig {
    pub rounds: usize,
    pub static_graph: bool,
    /// Multiplier on the initial `W_a`.
    pub init_gain: f64,
}

impl Default for ReasonerConfig {
    fn default() -> Self {
        ReasonerConfig {
            rounds: DEFAULT_ROUNDS,
            static_graph: false,
            init_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub lr: f64,
    pub gamma: f64,
    pub entropy_coef: f64,
    pub batch_size: usize,
    pub critic_coef: f64,
    pub shaping: bool,
    pub shape_in_loss: bool,
    pub prior_grad: PriorGrad,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        let o = PlannerOptions::default();
        let h = Hyper::default();
        PlannerConfig {
            lr: h.lr,
            gamma: h.gamma,
            entropy_coef: h.entropy_coef,
            batch_size: h.batch_size,
            critic_coef: h.critic_coef,
            shaping: o.shaping,
            shape_in_loss: o.shape_in_loss,
            prior_grad: o.prior_grad,
        }
    }
}

impl PlannerConfig {
    pub fn hyper(&self) -> Hyper {
        Hyper {
            lr: self.lr,
            gamma: self.gamma,
            entropy_coef: self.entropy_coef,
            batch_size: self.batch_size,
            critic_coef: self.critic_coef,
        }
    }

    pub fn options(&self) -> PlannerOptions {
        PlannerOptions {
            shaping: self.shaping,
            shape_in_loss: self.shape_in_loss,
            prior_grad: self.prior_grad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub services: usize,
    pub horizon: usize,
    /// Fault campaign (JSONL) replayed by episode seed.
    pub campaign: Option<PathBuf>,
    /// Feed reasoner scores into the observation. Not supported.
    pub use_psi_features: bool,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            services: DEFAULT_SERVICES,
            horizon: HORIZON,
            campaign: None,
            use_psi_features: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Size of the generated corpus when `data.corpus` is empty.
    pub records: usize,
    pub repetitions: usize,
    /// Number of paired recovery seeds, starting at zero.
    pub seeds: usize,
    pub parallel: bool,
    pub top_k: usize,
    /// Reasoner dimensions to sweep; empty means only `embedding.dim`.
    pub sweep_dims: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            records: 50_000,
            repetitions: 3,
            seeds: 20,
            parallel: false,
            top_k: 3,
            sweep_dims: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embedding.dim < 8 {
            return bad(format!("embedding.dim must be at least 8, got {}", self.embedding.dim));
        }
        if self.codebook.prototypes == 0 {
            return bad("codebook.prototypes must be positive".into());
        }
        if !(self.codebook.temperature > 0.0 && self.codebook.temperature.is_finite()) {
            return bad("codebook.temperature must be positive".into());
        }
        if self.templates.scales.is_empty() || self.templates.scales.contains(&0) {
            return bad("templates.scales must be non-empty and positive".into());
        }
        if self.reasoner.rounds == 0 {
            return bad("reasoner.rounds must be positive".into());
        }
        if !(self.reasoner.init_gain > 0.0 && self.reasoner.init_gain.is_finite()) {
            return bad("reasoner.init_gain must be positive".into());
        }
        if self.env.use_psi_features {
            return bad("env.use_psi_features is not supported".into());
        }
        if self.env.services == 0 || self.env.horizon == 0 {
            return bad("env.services and env.horizon must be positive".into());
        }
        let h = &self.planner;
        if !(h.lr.is_finite() && h.lr > 0.0) || !(0.0..=1.0).contains(&h.gamma) || h.batch_size == 0 {
            return bad("planner needs lr > 0, gamma in [0, 1] and batch_size > 0".into());
        }
        if self.bench.repetitions == 0 || self.bench.top_k == 0 {
            return bad("bench.repetitions and bench.top_k must be positive".into());
        }
        if self.bench.sweep_dims.iter().any(|&d| d < 8) {
            return bad("bench.sweep_dims entries must be at least 8".into());
        }
        for f in self.formats.values() {
            f.validate()?;
        }
        self.format()?;
        self.trainer.validate()?;
        self.corpus.validate()
    }

    /// The header format named by `data.format`, `standard` when unset.
    pub fn format(&self) -> Result<(String, HeaderFormat)> {
        let name = self.data.format.clone().unwrap_or_else(|| "standard".into());
        let format = match self.formats.get(&name) {
            Some(f) => f.clone(),
            None => match name.as_str() {
                "standard" => HeaderFormat::standard(),
                "hdfs" => HeaderFormat::hdfs(),
                _ => return Err(Error::Config(format!("unknown header format `{name}`"))),
            },
        };
        Ok((name, format))
    }

    pub fn environment(&self) -> Result<Environment> {
        let env = Environment::new(self.env.services, self.env.horizon);
        match &self.env.campaign {
            Some(path) => env.with_campaign(crate::env::Campaign::load(path)?),
            None => Ok(env),
        }
    }

    /// Fully resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.embedding.dim, 64);
        assert_eq!(c.codebook.prototypes, 32);
        assert_eq!(c.templates.scales, vec![3, 5, 7]);
        assert_eq!(c.trainer.lambdas.causal, 0.5);
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = RunConfig::from_toml("seed = 7\n[trainer]\nepochs = 2\n[planner]\nlr = 0.001\nprior_grad = \"kl\"\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.trainer.epochs, 2);
        assert_eq!(c.planner.lr, 0.001);
        assert_eq!(c.planner.prior_grad, PriorGrad::Kl);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        for text in [
            "colour = 1",
            "[trainer]\nepoch = 3",
            "[planner]\nlearning_rate = 1.0",
            "[env]\nuse_psi_features = true",
            "[embedding]\ndim = 4",
            "[data]\nformat = \"nginx\"",
            "[templates]\nscales = []",
            "[formats.x]\nfields = [\"level\"]",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn custom_format_is_found() {
        let c = RunConfig::from_toml(
            "[data]\nformat = \"mine\"\n[formats.mine]\nfields = [\"level\", \"message\"]\ndelimiter = \"|\"\n",
        )
        .unwrap();
        let (name, f) = c.format().unwrap();
        assert_eq!(name, "mine");
        assert_eq!(f.delimiter, Some('|'));
    }

    #[test]
    fn hash_tracks_content_not_output_dir() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out = PathBuf::from("elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.trainer.epochs = 3;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
