//! End-to-end composition of the stages under one [`RunConfig`].

use std::path::Path;

use rayon::prelude::*;

use crate::config::{FitOn, RunConfig};
use crate::corpus::{self, SequenceLabel, SyntheticCorpus};
use crate::embedding::{embed_event, fit_prototypes, EventVector, PrototypeCodebook};
use crate::env::Environment;
use crate::error::{Error, Result};
use crate::ingest::{load_corpora, parse_text, tokenize, EventStream, LogRecord};
use crate::reasoner::ReasonerParams;
use crate::template::{extract_windows, window_mean};
use crate::trainer::{build_sequences, fit, FitOutcome, LabeledSequence, Model};

pub fn embed_records(records: &[LogRecord], dim: usize) -> Vec<EventVector> {
    records.par_iter().map(|r| embed_event(&tokenize(&r.message), dim)).collect()
}

/// Means of every window of every scale that fits the stream.
pub fn window_means(vectors: &[EventVector], scales: &[usize]) -> Result<Vec<EventVector>> {
    let windows = extract_windows(vectors.len(), scales)?;
    Ok(windows
        .sets
        .iter()
        .flat_map(|set| set.windows().map(|w| window_mean(&vectors[w])))
        .collect())
}

pub fn fit_codebook(vectors: &[EventVector], cfg: &RunConfig) -> Result<PrototypeCodebook> {
    let c = &cfg.codebook;
    match c.fit_on {
        FitOn::Events => fit_prototypes(vectors, c.prototypes, c.temperature, cfg.seed),
        FitOn::WindowMeans => {
            let means = window_means(vectors, &cfg.templates.scales)?;
            fit_prototypes(&means, c.prototypes, c.temperature, cfg.seed)
        }
    }
}

/// Fresh model of reasoner dimension `dim`.
pub fn init_model(cfg: &RunConfig, env: &Environment, dim: usize) -> Result<Model> {
    let r = &cfg.reasoner;
    let mut params = ReasonerParams::init_with_gain(dim, r.rounds, r.init_gain, cfg.seed);
    params.static_graph = r.static_graph;
    Model::new(&params, env, cfg.planner.options(), cfg.seed)
}

/// Labeled corpus carried through embedding and template abstraction.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub stream: EventStream,
    pub vectors: Vec<EventVector>,
    pub codebook: PrototypeCodebook,
    pub labels: Vec<SequenceLabel>,
    pub sequences: Vec<LabeledSequence>,
}

impl Dataset {
    pub fn from_stream(stream: EventStream, labels: Vec<SequenceLabel>, cfg: &RunConfig) -> Result<Self> {
        let vectors = embed_records(&stream.records, cfg.embedding.dim);
        let codebook = fit_codebook(&vectors, cfg)?;
        let sequences = build_sequences(&vectors, &labels, &codebook, &cfg.templates.scales, cfg.templates.options())?;
        Ok(Dataset {
            stream,
            vectors,
            codebook,
            labels,
            sequences,
        })
    }

    pub fn from_synthetic(corpus: &SyntheticCorpus, cfg: &RunConfig) -> Result<Self> {
        let (name, format) = cfg.format()?;
        let stream = parse_text(&corpus.lines.join("\n"), &format, &name, Path::new("<generated>"))?;
        Dataset::from_stream(stream, corpus.labels.clone(), cfg)
    }

    /// Reads `data.corpus` and `data.labels`.
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let labels_path = cfg
            .data
            .labels
            .as_ref()
            .ok_or_else(|| Error::Config("no dataset: set data.corpus and data.labels".into()))?;
        if cfg.data.corpus.is_empty() {
            return Err(Error::Config("no dataset: data.corpus is empty".into()));
        }
        for p in cfg.data.corpus.iter().chain([labels_path]) {
            if !p.exists() {
                return Err(Error::Config(format!("dataset file {} does not exist", p.display())));
            }
        }
        let (name, format) = cfg.format()?;
        let mut streams = load_corpora(&cfg.data.corpus, &format, &name)?.into_iter();
        let mut stream = streams.next().expect("at least one corpus");
        for s in streams {
            stream.records.extend(s.records);
        }
        Dataset::from_stream(stream, corpus::load_labels(labels_path)?, cfg)
    }

    /// Labels of the held-out split used by [`train`].
    pub fn validation_indices(&self, cfg: &RunConfig) -> Vec<usize> {
        let idx: Vec<usize> = (0..self.sequences.len()).collect();
        let (train, val) = corpus::split(&idx, cfg.trainer.val_fraction, cfg.seed);
        if val.is_empty() {
            train
        } else {
            val
        }
    }
}

pub fn train(cfg: &RunConfig, data: &Dataset, env: &Environment) -> Result<FitOutcome> {
    let model = init_model(cfg, env, data.codebook.dim())?;
    fit(&data.sequences, env, model, cfg.planner.hyper(), &cfg.trainer, cfg.seed)
}

/// Top-1 and top-k root-cause accuracy of `model` on the sequences at `indices`.
pub fn localization(model: &Model, data: &Dataset, indices: &[usize], k: usize) -> Result<(f64, f64)> {
    let scores: Vec<_> = indices.par_iter().map(|&i| model.score(&data.sequences[i].templates)).collect();
    let labels: Vec<usize> = indices.iter().map(|&i| data.sequences[i].root_cause_index).collect();
    crate::bench::localization_accuracy(&scores, &labels, k)
}
