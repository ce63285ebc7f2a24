//! Seeded synthetic log corpus with injected fault chains.
//!
//! Each sequence is `seq_len` consecutive records. Most records come from
//! routine templates; one fault chain per sequence starts with its
//! pattern's root template and continues through symptom templates, with
//! occasional routine records interleaved. Symptom templates are shared
//! between patterns and also appear as stray decoys outside chains, so only
//! the root template identifies the origin.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::{Duration, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const ROUTINE: [&str; 12] = [
    "received replica chunk blk{n} from peer",
    "packet responder terminating cleanly",
    "served cached object to downstream client",
    "checksum verification succeeded",
    "session opened for user {u}",
    "heartbeat acknowledged by coordinator",
    "cache statistics snapshot recorded",
    "flushed dirty pages to volume",
    "http get items returned ok",
    "background compaction finished segment {n}",
    "lease renewed before expiry",
    "metrics exporter pushed series",
];

const ROOTS: [&str; 8] = [
    "kernel oom killer invoked pid {n}",
    "configuration checksum mismatch after deploy",
    "request queue saturated beyond limit",
    "heap usage climbing steadily without release",
    "link down on interface carrier lost",
    "no space left on device",
    "certificate expired handshake rejected",
    "clock skew exceeds allowed bound",
];

const SYMPTOMS: [&str; 12] = [
    "connection refused by upstream",
    "timeout waiting for response",
    "retrying failed operation attempt {n}",
    "replica marked unhealthy by monitor",
    "write failed with io error",
    "circuit breaker opened for dependency",
    "health probe failed on port {n}",
    "request dropped due to backpressure",
    "transaction rolled back",
    "worker thread stalled",
    "leader election triggered",
    "service degraded error rate rising",
];

const USERS: [&str; 6] = ["alice", "bob", "carol", "dave", "erin", "frank"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub sequences: usize,
    pub seq_len: usize,
    /// Distinct fault-chain patterns, at most 8.
    pub patterns: usize,
    pub min_chain: usize,
    pub max_chain: usize,
    /// Probability of a routine record between consecutive chain events.
    pub gap_prob: f64,
    /// Probability that a routine slot emits a stray symptom instead.
    pub decoy_prob: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            sequences: 500,
            seq_len: 32,
            patterns: 8,
            min_chain: 3,
            max_chain: 5,
            gap_prob: 0.0,
            decoy_prob: 0.0,
            seed: 13,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patterns == 0 || self.patterns > ROOTS.len() {
            return Err(Error::Config(format!("patterns must be in 1..={}", ROOTS.len())));
        }
        if self.min_chain < 2 || self.min_chain > self.max_chain {
            return Err(Error::Config("chain lengths need 2 <= min_chain <= max_chain".into()));
        }
        // a chain with every gap taken still leaves one routine record
        if 2 * self.max_chain > self.seq_len {
            return Err(Error::Config(format!(
                "seq_len {} too short for chains of length {}",
                self.seq_len, self.max_chain
            )));
        }
        if self.sequences == 0 {
            return Err(Error::Config("sequences must be positive".into()));
        }
        for p in [self.gap_prob, self.decoy_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLabel {
    pub sequence: usize,
    /// Index of the sequence's first record in the corpus.
    pub start: usize,
    pub len: usize,
    pub pattern: usize,
    /// Position within the sequence.
    pub root_cause: usize,
    /// Ordered positions within the sequence, root first.
    pub chain: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub lines: Vec<String>,
    pub labels: Vec<SequenceLabel>,
}

fn fill<R: Rng>(template: &str, rng: &mut R) -> String {
    let mut out = String::with_capacity(template.len() + 16);
    let mut rest = template;
    while let Some(pos) = rest.find('{') {
        out.push_str(&rest[..pos]);
        let end = pos + rest[pos..].find('}').expect("closed placeholder");
        match &rest[pos + 1..end] {
            "n" => out.push_str(&rng.random_range(0..5000u32).to_string()),
            _ => out.push_str(USERS[rng.random_range(0..USERS.len())]),
        }
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    out
}

/// Symptom templates used by a pattern, in chain order.
fn pattern_symptoms(pattern: usize) -> [usize; 4] {
    [0, 1, 2, 3].map(|j| (pattern * 3 + j * 5) % SYMPTOMS.len())
}

enum Slot {
    Routine,
    Root(usize),
    Symptom(usize),
}

pub fn generate(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let origin = NaiveDate::from_ymd_opt(2024, 1, 1)
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .expect("valid date");
    let mut lines = Vec::with_capacity(spec.sequences * spec.seq_len);
    let mut labels = Vec::with_capacity(spec.sequences);

    for sequence in 0..spec.sequences {
        let pattern = rng.random_range(0..spec.patterns);
        let chain_len = rng.random_range(spec.min_chain..=spec.max_chain);
        let symptoms = pattern_symptoms(pattern);
        // chain body: root, then symptoms with optional routine gaps
        let mut body = vec![Slot::Root(pattern)];
        for s in symptoms.iter().cycle().take(chain_len - 1) {
            if rng.random_bool(spec.gap_prob) {
                body.push(Slot::Routine);
            }
            body.push(Slot::Symptom(*s));
        }
        let offset = rng.random_range(0..=spec.seq_len - body.len());
        let mut slots: Vec<Slot> = (0..offset).map(|_| Slot::Routine).collect();
        slots.extend(body);
        slots.resize_with(spec.seq_len, || Slot::Routine);

        let mut chain = Vec::with_capacity(chain_len);
        let start = lines.len();
        let service = rng.random_range(0..6);
        for (pos, slot) in slots.iter().enumerate() {
            let (level, src, template) = match slot {
                Slot::Root(p) => {
                    chain.push(pos);
                    ("ERROR", service, ROOTS[*p])
                }
                Slot::Symptom(s) => {
                    chain.push(pos);
                    ("WARN", service, SYMPTOMS[*s])
                }
                Slot::Routine if rng.random_bool(spec.decoy_prob) => {
                    ("WARN", rng.random_range(0..6), SYMPTOMS[rng.random_range(0..SYMPTOMS.len())])
                }
                Slot::Routine => ("INFO", rng.random_range(0..6), ROUTINE[rng.random_range(0..ROUTINE.len())]),
            };
            let ts = origin + Duration::seconds(lines.len() as i64);
            lines.push(format!(
                "{} {level} svc-{src} {}",
                ts.format("%Y-%m-%d %H:%M:%S"),
                fill(template, &mut rng)
            ));
        }
        labels.push(SequenceLabel {
            sequence,
            start,
            len: spec.seq_len,
            pattern,
            root_cause: chain[0],
            chain,
        });
    }
    Ok(SyntheticCorpus { lines, labels })
}

/// A corpus of about `records` lines for throughput runs.
pub fn bench_spec(records: usize, seed: u64) -> CorpusSpec {
    let base = CorpusSpec::default();
    CorpusSpec {
        sequences: records.div_ceil(base.seq_len).max(1),
        seed,
        ..base
    }
}

impl SyntheticCorpus {
    /// Writes `corpus.log` and `labels.jsonl` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let log = dir.join("corpus.log");
        let mut out = BufWriter::new(File::create(&log).map_err(|e| Error::io(&log, e))?);
        for l in &self.lines {
            writeln!(out, "{l}").map_err(|e| Error::io(&log, e))?;
        }
        out.flush().map_err(|e| Error::io(&log, e))?;
        write_labels(&dir.join("labels.jsonl"), &self.labels)
    }
}

pub fn write_labels(path: &Path, labels: &[SequenceLabel]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for l in labels {
        serde_json::to_writer(&mut out, l).map_err(|e| Error::io(path, e.into()))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_labels(path: &Path) -> Result<Vec<SequenceLabel>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut labels = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let label: SequenceLabel = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if label.chain.first() != Some(&label.root_cause) || label.chain.iter().any(|c| *c >= label.len) {
            return Err(Error::Config(format!(
                "{}:{}: chain must start at the root cause and stay inside the sequence",
                path.display(),
                n + 1
            )));
        }
        labels.push(label);
    }
    Ok(labels)
}

/// Shuffles `labels` with `seed` and splits off the last `val_fraction`.
pub fn split<T: Clone>(items: &[T], val_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((items.len() as f64) * val_fraction).round() as usize;
    let n_train = items.len() - n_val.min(items.len());
    let pick = |idx: &[usize]| idx.iter().map(|i| items[*i].clone()).collect();
    (pick(&order[..n_train]), pick(&order[n_train..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_text, HeaderFormat};

    #[test]
    fn labels_are_consistent() {
        let c = generate(&CorpusSpec::default()).unwrap();
        assert_eq!(c.lines.len(), 500 * 32);
        assert_eq!(c.labels.len(), 500);
        for l in &c.labels {
            assert_eq!(l.chain[0], l.root_cause);
            assert!(l.chain.windows(2).all(|w| w[0] < w[1]));
            assert!((3..=5).contains(&l.chain.len()));
            assert!(l.chain.len() < l.len);
            assert!(c.lines[l.start + l.root_cause].contains(" ERROR "));
        }
        let patterns: std::collections::BTreeSet<_> = c.labels.iter().map(|l| l.pattern).collect();
        assert_eq!(patterns.len(), 8);
    }

    #[test]
    fn deterministic_and_parseable() {
        let a = generate(&CorpusSpec::default()).unwrap();
        let b = generate(&CorpusSpec::default()).unwrap();
        assert_eq!(a, b);
        let s = parse_text(&a.lines.join("\n"), &HeaderFormat::standard(), "standard", Path::new("mem")).unwrap();
        assert_eq!(s.stats.matched, a.lines.len());
        assert_eq!(s.stats.unmatched, 0);
    }

    #[test]
    fn round_trip_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = generate(&CorpusSpec { sequences: 10, ..Default::default() }).unwrap();
        c.write(dir.path()).unwrap();
        assert_eq!(load_labels(&dir.path().join("labels.jsonl")).unwrap(), c.labels);
    }

    #[test]
    fn split_is_seeded_partition() {
        let items: Vec<usize> = (0..100).collect();
        let (tr, va) = split(&items, 0.2, 3);
        assert_eq!((tr.len(), va.len()), (80, 20));
        let mut all = [tr.clone(), va].concat();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(split(&items, 0.2, 3).0, tr);
    }

    #[test]
    fn rejects_bad_spec() {
        assert!(generate(&CorpusSpec { patterns: 9, ..Default::default() }).is_err());
        assert!(generate(&CorpusSpec { seq_len: 8, ..Default::default() }).is_err());
    }
}
