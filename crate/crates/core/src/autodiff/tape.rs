use super::params::{ParamId, ParamSet};
use super::special::{trigamma, kl_beta_uniform};
use super::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `n x m` plus a broadcast `1 x m` row.
    AddRow(Var, Var),
    /// `n x m` times a broadcast `n x 1` column.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    SoftmaxRow(Var),
    LogSoftmaxRow(Var),
    Sum(Var),
    Mean(Var),
    SumSq(Var),
    SumRows(Var),
    /// Rows divided by `max(norm, eps)`; norms kept for backward.
    RowNormalize(Var, f64, Vec<f64>),
    /// Pairwise squared distances between rows of two matrices.
    PairSqDist(Var, Var),
    Gather(Var, Vec<usize>),
    KlBetaUniform(Var, Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one backward pass, indexed by tape position.
#[derive(Debug, Clone)]
pub struct Grads {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Grads {
    /// Gradient with respect to a recorded value (zeros if it did not influence the loss).
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Parameter gradients, summed over every time a parameter was placed on the tape.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(id, v) in &self.params {
            let Some(g) = &self.grads[v.0] else { continue };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => acc.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out
    }
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Values are pushed in evaluation order, so reverse recording order is a
/// valid topological order for the backward sweep.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Sign pattern of every branch point (ReLU inputs, norm guards). Two
    /// evaluations with different signatures sit on different smooth pieces.
    kinks: Vec<bool>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) {
    assert!(
        a.shape() == b.shape(),
        "shape mismatch in {op}: {:?} vs {:?}",
        a.shape(),
        b.shape()
    );
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.kinks.clear();
    }

    pub fn kink_signature(&self) -> &[bool] {
        &self.kinks
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    /// Copies a value back onto the tape as a constant, blocking gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.cols() == tb.rows(),
            "shape mismatch in matmul: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let out = ta.matmul(tb);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        same_shape("add", self.value(a), self.value(b));
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        same_shape("sub", self.value(a), self.value(b));
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        same_shape("mul", self.value(a), self.value(b));
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (ta, tr) = (self.value(a), self.value(row));
        assert!(
            tr.rows() == 1 && tr.cols() == ta.cols(),
            "shape mismatch in add_row: {:?} vs {:?}",
            ta.shape(),
            tr.shape()
        );
        let mut out = ta.clone();
        for r in 0..out.rows() {
            out.row_mut(r).iter_mut().zip(tr.data()).for_each(|(o, b)| *o += b);
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (ta, tc) = (self.value(a), self.value(col));
        assert!(
            tc.cols() == 1 && tc.rows() == ta.rows(),
            "shape mismatch in mul_col: {:?} vs {:?}",
            ta.shape(),
            tc.shape()
        );
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let c = tc.get(r, 0);
            out.row_mut(r).iter_mut().for_each(|o| *o *= c);
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = &self.nodes[a.0].value;
        self.kinks.extend(t.data().iter().map(|&x| x > 0.0));
        let out = t.map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    /// `ln(sigmoid(x))`, stable for large |x|.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -softplus(-x));
        self.push(out, Op::LogSigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Ln(a))
    }

    /// Max-subtracted softmax along each row.
    pub fn softmax_row(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRow(a))
    }

    pub fn log_softmax_row(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push(out, Op::LogSoftmaxRow(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(out, Op::Mean(a))
    }

    pub fn sumsq(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).data().iter().map(|x| x * x).sum());
        self.push(out, Op::SumSq(a))
    }

    /// `n x m -> n x 1` row sums.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::column(t.iter_rows().map(|r| r.iter().sum()).collect());
        self.push(out, Op::SumRows(a))
    }

    pub fn row_normalize(&mut self, a: Var, eps: f64) -> Var {
        let t = &self.nodes[a.0].value;
        let norms: Vec<f64> = t.iter_rows().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        self.kinks.extend(norms.iter().map(|&n| n > eps));
        let mut out = t.clone();
        for (r, n) in norms.iter().enumerate() {
            let denom = n.max(eps);
            out.row_mut(r).iter_mut().for_each(|v| *v /= denom);
        }
        self.push(out, Op::RowNormalize(a, eps, norms))
    }

    /// `out[i][k] = ||a_i - b_k||^2`.
    pub fn pair_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(
            ta.cols() == tb.cols(),
            "shape mismatch in pair_sq_dist: {:?} vs {:?}",
            ta.shape(),
            tb.shape()
        );
        let mut out = Tensor::zeros(ta.rows(), tb.rows());
        for i in 0..ta.rows() {
            for k in 0..tb.rows() {
                let d: f64 = ta.row(i).iter().zip(tb.row(k)).map(|(x, y)| (x - y) * (x - y)).sum();
                out.set(i, k, d);
            }
        }
        self.push(out, Op::PairSqDist(a, b))
    }

    /// Picks elements by flat row-major index into a new `rows x cols` tensor.
    pub fn gather(&mut self, a: Var, flat: Vec<usize>, rows: usize, cols: usize) -> Var {
        assert_eq!(flat.len(), rows * cols, "gather index count does not match output shape");
        let t = self.value(a);
        let out = Tensor::new(rows, cols, flat.iter().map(|&i| t.data()[i]).collect());
        self.push(out, Op::Gather(a, flat))
    }

    /// Row `r` as a `1 x m` tensor.
    pub fn select_row(&mut self, a: Var, r: usize) -> Var {
        let cols = self.value(a).cols();
        self.gather(a, (r * cols..(r + 1) * cols).collect(), 1, cols)
    }

    /// Elementwise `KL(Beta(alpha, beta) || Beta(1, 1))`.
    pub fn kl_beta_uniform(&mut self, alpha: Var, beta: Var) -> Var {
        same_shape("kl_beta_uniform", self.value(alpha), self.value(beta));
        let out = self.value(alpha).zip_map(self.value(beta), kl_beta_uniform);
        self.push(out, Op::KlBetaUniform(alpha, beta))
    }

    /// Reverse sweep from a scalar loss. The tape is left intact.
    pub fn backward(&self, loss: Var) -> Grads {
        let shape = self.shape(loss);
        assert!(shape == [1, 1], "backward requires a scalar loss, got shape {shape:?}");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Constant | Op::Input | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.matmul(&tb.transpose()));
                    acc(&mut grads, *b, ta.transpose().matmul(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.map(|v| -v));
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, g.zip_map(tb, |gv, bv| gv * bv));
                    acc(&mut grads, *b, g.zip_map(ta, |gv, av| gv * av));
                }
                Op::AddRow(a, row) => {
                    let mut gr = Tensor::zeros(1, g.cols());
                    for r in g.iter_rows() {
                        gr.data_mut().iter_mut().zip(r).for_each(|(s, v)| *s += v);
                    }
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *row, gr);
                }
                Op::MulCol(a, col) => {
                    let (ta, tc) = (self.value(*a), self.value(*col));
                    let mut ga = g.clone();
                    let mut gc = Tensor::zeros(tc.rows(), 1);
                    for r in 0..g.rows() {
                        let c = tc.get(r, 0);
                        ga.row_mut(r).iter_mut().for_each(|v| *v *= c);
                        let dot: f64 = g.row(r).iter().zip(ta.row(r)).map(|(x, y)| x * y).sum();
                        gc.set(r, 0, dot);
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g.map(|v| v * c)),
                Op::AddScalar(a) => acc(&mut grads, *a, g.clone()),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
                Op::Sigmoid(a) => acc(&mut grads, *a, g.zip_map(y, |gv, s| gv * s * (1.0 - s))),
                Op::LogSigmoid(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |gv, xv| gv * sigmoid(-xv)));
                }
                Op::Tanh(a) => acc(&mut grads, *a, g.zip_map(y, |gv, t| gv * (1.0 - t * t))),
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |gv, xv| gv * sigmoid(xv)));
                }
                Op::Exp(a) => acc(&mut grads, *a, g.zip_map(y, |gv, e| gv * e)),
                Op::Ln(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, g.zip_map(x, |gv, xv| gv / xv));
                }
                Op::SoftmaxRow(a) => {
                    let mut gx = g.clone();
                    for r in 0..g.rows() {
                        let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, p)| x * p).sum();
                        gx.row_mut(r)
                            .iter_mut()
                            .zip(y.row(r))
                            .for_each(|(gv, p)| *gv = p * (*gv - dot));
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::LogSoftmaxRow(a) => {
                    let mut gx = g.clone();
                    for r in 0..g.rows() {
                        let total: f64 = g.row(r).iter().sum();
                        gx.row_mut(r)
                            .iter_mut()
                            .zip(y.row(r))
                            .for_each(|(gv, ly)| *gv -= ly.exp() * total);
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::Sum(a) => {
                    let [r, c] = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item()));
                }
                Op::Mean(a) => {
                    let [r, c] = self.shape(*a);
                    acc(&mut grads, *a, Tensor::filled(r, c, g.item() / (r * c) as f64));
                }
                Op::SumSq(a) => {
                    let s = g.item();
                    acc(&mut grads, *a, self.value(*a).map(|x| 2.0 * s * x));
                }
                Op::SumRows(a) => {
                    let [r, c] = self.shape(*a);
                    let mut gx = Tensor::zeros(r, c);
                    for i in 0..r {
                        let gi = g.get(i, 0);
                        gx.row_mut(i).iter_mut().for_each(|v| *v = gi);
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::RowNormalize(a, eps, norms) => {
                    let mut gx = g.clone();
                    for (r, &n) in norms.iter().enumerate() {
                        if n > *eps {
                            let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(x, u)| x * u).sum();
                            gx.row_mut(r)
                                .iter_mut()
                                .zip(y.row(r))
                                .for_each(|(gv, u)| *gv = (*gv - u * dot) / n);
                        } else {
                            gx.row_mut(r).iter_mut().for_each(|gv| *gv /= eps);
                        }
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::PairSqDist(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                    let mut gb = Tensor::zeros(tb.rows(), tb.cols());
                    for i in 0..ta.rows() {
                        for k in 0..tb.rows() {
                            let w = 2.0 * g.get(i, k);
                            if w == 0.0 {
                                continue;
                            }
                            for j in 0..ta.cols() {
                                let diff = ta.get(i, j) - tb.get(k, j);
                                ga.row_mut(i)[j] += w * diff;
                                gb.row_mut(k)[j] -= w * diff;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Gather(a, flat) => {
                    let [r, c] = self.shape(*a);
                    let mut gx = Tensor::zeros(r, c);
                    for (gv, &i) in g.data().iter().zip(flat) {
                        gx.data_mut()[i] += gv;
                    }
                    acc(&mut grads, *a, gx);
                }
                Op::KlBetaUniform(al, be) => {
                    let (ta, tb) = (self.value(*al), self.value(*be));
                    let mut ga = g.clone();
                    let mut gb = g.clone();
                    for i in 0..g.len() {
                        let (a, b) = (ta.data()[i], tb.data()[i]);
                        let tri_ab = trigamma(a + b);
                        ga.data_mut()[i] *= (a - 1.0) * trigamma(a) - (a + b - 2.0) * tri_ab;
                        gb.data_mut()[i] *= (b - 1.0) * trigamma(b) - (a + b - 2.0) * tri_ab;
                    }
                    acc(&mut grads, *al, ga);
                    acc(&mut grads, *be, gb);
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, Var(i))),
                _ => None,
            })
            .collect();
        Grads { grads, params }
    }

    /// Backward pass that adds parameter gradients into `params` and clears the tape.
    pub fn backward_into(&mut self, loss: Var, params: &mut ParamSet) {
        let grads = self.backward(loss);
        params.accumulate(&grads.param_grads());
        self.clear();
    }
}
