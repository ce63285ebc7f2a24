//! Small dense networks and the Adam optimizer over a [`ParamSet`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamId, ParamSet, Tape, Tensor, Var};

/// Two-layer perceptron `in -> hidden (tanh) -> out`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect())
}

impl Mlp {
    /// Glorot-uniform hidden layer; the output layer is scaled by `out_gain`.
    pub fn new(params: &mut ParamSet, name: &str, input: usize, hidden: usize, output: usize, out_gain: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b1 = (6.0 / (input + hidden) as f64).sqrt();
        let b2 = (6.0 / (hidden + output) as f64).sqrt() * out_gain;
        Mlp {
            w1: params.add(format!("{name}.w1"), uniform(&mut rng, input, hidden, b1)),
            b1: params.add(format!("{name}.b1"), Tensor::zeros(1, hidden)),
            w2: params.add(format!("{name}.w2"), uniform(&mut rng, hidden, output, b2)),
            b2: params.add(format!("{name}.b2"), Tensor::zeros(1, output)),
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    pub fn input_dim(&self, params: &ParamSet) -> usize {
        params.value(self.w1).rows()
    }

    pub fn output_dim(&self, params: &ParamSet) -> usize {
        params.value(self.w2).cols()
    }

    /// Batch forward pass; `x` is `batch x input`.
    pub fn forward(&self, params: &ParamSet, x: &Tensor) -> Tensor {
        let mut h = x.matmul(params.value(self.w1));
        let b1 = params.value(self.b1);
        for r in 0..h.rows() {
            h.row_mut(r).iter_mut().zip(b1.data()).for_each(|(v, b)| *v = (*v + b).tanh());
        }
        let mut out = h.matmul(params.value(self.w2));
        let b2 = params.value(self.b2);
        for r in 0..out.rows() {
            out.row_mut(r).iter_mut().zip(b2.data()).for_each(|(v, b)| *v += b);
        }
        out
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, params: &ParamSet, x: Var) -> Var {
        let w1 = tape.param(params, self.w1);
        let b1 = tape.param(params, self.b1);
        let w2 = tape.param(params, self.w2);
        let b2 = tape.param(params, self.b2);
        let h = tape.matmul(x, w1);
        let h = tape.add_row(h, b1);
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2);
        tape.add_row(o, b2)
    }
}

/// Adam over a fixed group of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the group's gradient to at most this global L2 norm.
    pub max_grad_norm: Option<f64>,
    group: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, group: Vec<ParamId>, lr: f64) -> Self {
        let zeros = |id: &ParamId| {
            let p = params.value(*id);
            Tensor::zeros(p.rows(), p.cols())
        };
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: None,
            m: group.iter().map(zeros).collect(),
            v: group.iter().map(zeros).collect(),
            group,
            t: 0,
        }
    }

    pub fn group(&self) -> &[ParamId] {
        &self.group
    }

    /// Global L2 norm of the group's gradients.
    pub fn grad_norm(&self, params: &ParamSet) -> f64 {
        self.group
            .iter()
            .map(|id| params.grad(*id).data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamSet) {
        self.t += 1;
        let clip = match self.max_grad_norm {
            Some(max) => {
                let norm = self.grad_norm(params);
                if norm > max { max / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (slot, id) in self.group.iter().enumerate() {
            let g = params.grad(*id).clone();
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let p = params.value_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        params.zero_grad_of(&self.group);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut params = ParamSet::new();
        let mlp = Mlp::new(&mut params, "net", 3, 8, 2, 1.0, 4);
        let x = Tensor::from_rows(&[[0.1, -0.2, 0.3], [1.0, 0.5, -0.5]]);
        let plain = mlp.forward(&params, &x);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = mlp.forward_on_tape(&mut tape, &params, xv);
        for (a, b) in plain.data().iter().zip(tape.value(out).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = ParamSet::new();
        let w = params.add("w", Tensor::row_vector(vec![3.0, -2.0]));
        let mut opt = Adam::new(&params, vec![w], 0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let v = tape.param(&params, w);
            let l = tape.sumsq(v);
            tape.backward_into(l, &mut params);
            opt.step(&mut params);
        }
        assert!(params.value(w).max_abs() < 1e-2);
        assert_eq!(params.grad(w).max_abs(), 0.0);
    }
}
