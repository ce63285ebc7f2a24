//! Root-cause scoring by multi-hop attention over an event graph.
//!
//! Every round builds a row-stochastic graph from normalized bilinear
//! similarities between the current event states, propagates states along
//! it and rectifies. A logistic readout of the final states gives each
//! event's probability of being the fault origin.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound on state norms in the similarity denominator.
pub const NORM_EPS: f64 = 1e-8;
pub const DEFAULT_ROUNDS: usize = 3;
const INIT_NOISE: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ReasonerParams {
    /// `d x d` bilinear form.
    pub w_a: Tensor,
    /// `d` readout weights.
    pub w_psi: Vec<f64>,
    pub rounds: usize,
    /// Build the graph once from the initial states instead of every round.
    pub static_graph: bool,
}

impl ReasonerParams {
    /// Identity plus small seeded Gaussian noise for `W_a`; zero readout.
    pub fn init(d: usize, rounds: usize, seed: u64) -> Self {
        Self::init_with_gain(d, rounds, 1.0, seed)
    }

    /// As [`init`](Self::init) with `W_a` multiplied by `gain`, which sharpens
    /// the initial attention rows.
    pub fn init_with_gain(d: usize, rounds: usize, gain: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, INIT_NOISE).expect("valid normal");
        let mut w_a = Tensor::identity(d);
        w_a.data_mut().iter_mut().for_each(|v| *v = gain * (*v + noise.sample(&mut rng)));
        ReasonerParams {
            w_a,
            w_psi: vec![0.0; d],
            rounds,
            static_graph: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_psi.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_psi.len();
        if self.rounds == 0 {
            return Err(Error::Config("reasoner needs at least one round".into()));
        }
        if self.w_a.shape() != [d, d] {
            return Err(Error::Config(format!(
                "W_a has shape {:?}, expected [{d}, {d}]",
                self.w_a.shape()
            )));
        }
        if !self.w_a.all_finite() || self.w_psi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("reasoner parameters must be finite".into()));
        }
        Ok(())
    }

    /// Registers `W_a` and `w_psi` as trainable parameters.
    pub fn register(&self, params: &mut ParamSet) -> ReasonerHandles {
        ReasonerHandles {
            w_a: params.add("reasoner.w_a", self.w_a.clone()),
            w_psi: params.add("reasoner.w_psi", Tensor::column(self.w_psi.clone())),
            rounds: self.rounds,
            static_graph: self.static_graph,
        }
    }

    pub fn from_params(params: &ParamSet, handles: &ReasonerHandles) -> Self {
        ReasonerParams {
            w_a: params.value(handles.w_a).clone(),
            w_psi: params.value(handles.w_psi).data().to_vec(),
            rounds: handles.rounds,
            static_graph: handles.static_graph,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReasonerHandles {
    pub w_a: ParamId,
    pub w_psi: ParamId,
    pub rounds: usize,
    pub static_graph: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGraph {
    /// `T x T`, rows sum to one.
    pub matrix: Tensor,
    pub round: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    /// `rounds + 1` matrices of shape `T x d`; the first is the input.
    pub states: Vec<Tensor>,
    /// Graph used in each round.
    pub graphs: Vec<AttentionGraph>,
}

impl HiddenStates {
    pub fn last(&self) -> &Tensor {
        self.states.last().expect("at least the initial states")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RootCauseScores {
    pub psi: Vec<f64>,
    /// Event indices by descending score, ties to the lower index.
    pub ranking: Vec<usize>,
}

impl RootCauseScores {
    pub fn from_psi(psi: Vec<f64>) -> Self {
        let mut ranking: Vec<usize> = (0..psi.len()).collect();
        ranking.sort_by(|&a, &b| psi[b].total_cmp(&psi[a]).then(a.cmp(&b)));
        RootCauseScores { psi, ranking }
    }

    pub fn len(&self) -> usize {
        self.psi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.psi.is_empty()
    }

    /// 0-based rank of each event.
    pub fn ranks(&self) -> Vec<usize> {
        let mut ranks = vec![0; self.psi.len()];
        for (r, &i) in self.ranking.iter().enumerate() {
            ranks[i] = r;
        }
        ranks
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn guarded_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt().max(NORM_EPS)
}

/// `h_i^T W_a h_j / (|h_i| |h_j|)` with norms floored at [`NORM_EPS`].
pub fn similarity(h_i: &[f64], h_j: &[f64], w_a: &Tensor) -> f64 {
    let d = h_i.len();
    assert!(
        w_a.shape() == [d, d] && h_j.len() == d,
        "shape mismatch in similarity: {:?} vs [{d}, {}]",
        w_a.shape(),
        h_j.len()
    );
    let mut bilinear = 0.0;
    for (r, hi) in h_i.iter().enumerate() {
        bilinear += hi * dot(w_a.row(r), h_j);
    }
    bilinear / (guarded_norm(h_i) * guarded_norm(h_j))
}

pub fn build_attention_graph(states: &Tensor, w_a: &Tensor, round: usize) -> AttentionGraph {
    let t = states.rows();
    if t == 1 {
        return AttentionGraph {
            matrix: Tensor::scalar(1.0),
            round,
        };
    }
    // Normalize once, then S = Hn W Hn^T.
    let mut normed = states.clone();
    for r in 0..t {
        let n = guarded_norm(states.row(r));
        normed.row_mut(r).iter_mut().for_each(|v| *v /= n);
    }
    let mut matrix = normed.matmul(w_a).matmul(&normed.transpose());
    for r in 0..t {
        let row = matrix.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    AttentionGraph { matrix, round }
}

pub fn multi_hop_update(initial: &Tensor, params: &ReasonerParams) -> HiddenStates {
    let mut states = vec![initial.clone()];
    let mut graphs: Vec<AttentionGraph> = Vec::with_capacity(params.rounds);
    for r in 0..params.rounds {
        let current = &states[r];
        let graph = if params.static_graph && r > 0 {
            AttentionGraph {
                matrix: graphs[0].matrix.clone(),
                round: r,
            }
        } else {
            build_attention_graph(current, &params.w_a, r)
        };
        let next = graph.matrix.matmul(current).map(|v| v.max(0.0));
        graphs.push(graph);
        states.push(next);
    }
    HiddenStates { states, graphs }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn root_cause_scores(final_states: &Tensor, w_psi: &[f64]) -> RootCauseScores {
    assert!(final_states.rows() > 0, "root_cause_scores on an empty sequence");
    let psi = final_states.iter_rows().map(|h| sigmoid(dot(w_psi, h))).collect();
    RootCauseScores::from_psi(psi)
}

/// Full inference for one template sequence (`T x d`).
pub fn infer(templates: &Tensor, params: &ReasonerParams) -> (HiddenStates, RootCauseScores) {
    let hidden = multi_hop_update(templates, params);
    let scores = root_cause_scores(hidden.last(), &params.w_psi);
    (hidden, scores)
}

/// Tape outputs of a differentiable reasoner pass.
#[derive(Debug, Clone, Copy)]
pub struct ReasonerVars {
    pub final_states: Var,
    /// `T x 1` readout logits; scores are their sigmoid.
    pub logits: Var,
}

/// Differentiable reasoner pass over `T x d` initial states.
pub fn forward_on_tape(tape: &mut Tape, initial: Var, w_a: Var, w_psi: Var, rounds: usize, static_graph: bool) -> ReasonerVars {
    let t = tape.shape(initial)[0];
    let mut h = initial;
    let mut frozen: Option<Var> = None;
    for _ in 0..rounds {
        let graph = match frozen {
            Some(a) => a,
            None if t == 1 => tape.constant(Tensor::scalar(1.0)),
            None => {
                let normed = tape.row_normalize(h, NORM_EPS);
                let normed_t = tape.transpose(normed);
                let left = tape.matmul(normed, w_a);
                let sims = tape.matmul(left, normed_t);
                tape.softmax_row(sims)
            }
        };
        if static_graph {
            frozen = Some(graph);
        }
        let mixed = tape.matmul(graph, h);
        h = tape.relu(mixed);
    }
    let logits = tape.matmul(h, w_psi);
    ReasonerVars {
        final_states: h,
        logits,
    }
}

#[derive(Serialize)]
struct ReportRow {
    index: usize,
    psi: f64,
    rank: usize,
    /// Strongest attention edges out of this event's row: `(j, A_ij)`.
    edges: Vec<(usize, f64)>,
}

/// One JSON object per event with score, rank and top attention edges of the last round.
pub fn write_report_jsonl<W: Write>(mut out: W, scores: &RootCauseScores, hidden: &HiddenStates, top_edges: usize) -> std::io::Result<()> {
    let ranks = scores.ranks();
    let graph = hidden.graphs.last().map(|g| &g.matrix);
    for (index, &psi) in scores.psi.iter().enumerate() {
        let edges = match graph {
            Some(a) => {
                let mut e: Vec<(usize, f64)> = a.row(index).iter().copied().enumerate().collect();
                e.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
                e.truncate(top_edges);
                e
            }
            None => Vec::new(),
        };
        let row = ReportRow {
            index,
            psi,
            rank: ranks[index],
            edges,
        };
        serde_json::to_writer(&mut out, &row)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_states(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Tensor {
        Tensor::new(t, d, (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn similarity_cases() {
        let id = Tensor::identity(3);
        let e0 = [1.0, 0.0, 0.0];
        let e1 = [0.0, 1.0, 0.0];
        assert_eq!(similarity(&e0, &e0, &id), 1.0);
        assert_eq!(similarity(&e0, &e1, &id), 0.0);
        let two = id.map(|v| 2.0 * v);
        assert_eq!(similarity(&e0, &e0, &two), 2.0);
        // zero vectors stay finite
        assert_eq!(similarity(&[0.0; 3], &e0, &id), 0.0);
    }

    #[test]
    fn graph_cases() {
        let h = Tensor::from_rows(&[[0.2, 0.5]; 4]);
        let g = build_attention_graph(&h, &Tensor::identity(2), 0);
        assert!(g.matrix.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        let single = build_attention_graph(&Tensor::row_vector(vec![1.0, 2.0]), &Tensor::identity(2), 0);
        assert_eq!(single.matrix, Tensor::scalar(1.0));
    }

    #[test]
    fn graph_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = random_states(&mut rng, 5, 3);
        let w = random_states(&mut rng, 3, 3);
        let g = build_attention_graph(&h, &w, 0);
        for i in 0..5 {
            let sims: Vec<f64> = (0..5).map(|j| similarity(h.row(i), h.row(j), &w)).collect();
            let z: f64 = sims.iter().map(|s| s.exp()).sum();
            for (j, s) in sims.iter().enumerate() {
                assert!((g.matrix.get(i, j) - s.exp() / z).abs() < 1e-12);
            }
            assert!((g.matrix.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_attention_averages() {
        let row = [0.3, 0.0, 1.2];
        let h = Tensor::from_rows(&[row; 3]);
        let p = ReasonerParams {
            w_a: Tensor::identity(3),
            w_psi: vec![0.0; 3],
            rounds: 1,
            static_graph: false,
        };
        let hidden = multi_hop_update(&h, &p);
        for r in hidden.states[1].iter_rows() {
            for (a, b) in r.iter().zip(row) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn convex_bound_on_nonnegative_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = random_states(&mut rng, 6, 4).map(f64::abs);
            let mut p = ReasonerParams::init(4, 3, rng.random());
            p.w_a = random_states(&mut rng, 4, 4);
            let hidden = multi_hop_update(&h, &p);
            for w in hidden.states.windows(2) {
                assert!(w[1].max_abs() <= w[0].max_abs() + 1e-12);
            }
        }
    }

    #[test]
    fn scores_and_ties() {
        let h = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let s = root_cause_scores(&h, &[0.0, 0.0]);
        assert_eq!(s.psi, vec![0.5, 0.5]);
        assert_eq!(s.ranking, vec![0, 1]);

        let s = root_cause_scores(&Tensor::row_vector(vec![1.0, 0.5]), &[1.0, 2.0]);
        assert!((s.psi[0] - 1.0 / (1.0 + (-2.0f64).exp())).abs() < 1e-15);
        assert!((s.psi[0] - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn static_graph_reuses_round_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = random_states(&mut rng, 5, 3);
        let mut p = ReasonerParams::init(3, 3, 1);
        p.static_graph = true;
        let hidden = multi_hop_update(&h, &p);
        assert_eq!(hidden.graphs[0].matrix, hidden.graphs[2].matrix);
    }

    #[test]
    fn tape_pass_matches_plain_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for static_graph in [false, true] {
            let h = random_states(&mut rng, 6, 4);
            let mut p = ReasonerParams::init(4, 3, 5);
            p.w_psi = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            p.static_graph = static_graph;
            let (_, plain) = infer(&h, &p);
            let mut tape = Tape::new();
            let hv = tape.constant(h.clone());
            let wa = tape.constant(p.w_a.clone());
            let wp = tape.constant(Tensor::column(p.w_psi.clone()));
            let out = forward_on_tape(&mut tape, hv, wa, wp, p.rounds, static_graph);
            for (l, psi) in tape.value(out.logits).data().iter().zip(&plain.psi) {
                assert!((sigmoid(*l) - psi).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn report_has_row_per_event() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_states(&mut rng, 4, 3);
        let (hidden, scores) = infer(&h, &ReasonerParams::init(3, 2, 0));
        let mut buf = Vec::new();
        write_report_jsonl(&mut buf, &scores, &hidden, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        let row: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(row["edges"].as_array().unwrap().len(), 2);
    }
}
