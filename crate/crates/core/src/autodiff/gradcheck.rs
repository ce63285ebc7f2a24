use super::params::{ParamId, ParamSet};
use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Tensor, h: f64, mut f: impl FnMut(&Tensor) -> f64) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink.
    pub skipped: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of `model` against central differences
/// with step `h`, over every scalar parameter. A coordinate is skipped when
/// the forward passes at `theta + h` and `theta - h` take different
/// branches at a ReLU or norm guard.
pub fn check_gradients<F>(model: F, params: &ParamSet, h: f64) -> GradCheck
where
    F: Fn(&mut Tape, &ParamSet) -> Var,
{
    let mut tape = Tape::new();
    let loss = model(&mut tape, params);
    let grads = tape.backward(loss).param_grads();
    let analytic = |id: ParamId| grads.iter().find(|(p, _)| *p == id).map(|(_, g)| g.clone());

    let eval = |p: &ParamSet| {
        let mut t = Tape::new();
        let l = model(&mut t, p);
        (t.value(l).item(), t.kink_signature().to_vec())
    };

    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for id in params.ids() {
        let an = analytic(id).unwrap_or_else(|| Tensor::zeros(params.value(id).rows(), params.value(id).cols()));
        for i in 0..params.value(id).len() {
            let orig = params.value(id).data()[i];
            probe.value_mut(id).data_mut()[i] = orig + h;
            let (up, sig_up) = eval(&probe);
            probe.value_mut(id).data_mut()[i] = orig - h;
            let (down, sig_down) = eval(&probe);
            probe.value_mut(id).data_mut()[i] = orig;
            if sig_up != sig_down {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let err = relative_error(an.data()[i], numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.name(id).to_string(), i));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut params = ParamSet::new();
        let theta = params.add("theta", Tensor::scalar(3.0));
        let report = check_gradients(
            |t, p| {
                let x = t.param(p, theta);
                t.sumsq(x)
            },
            &params,
            1e-5,
        );
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert_eq!(report.checked, 1);
    }

    #[test]
    fn relu_kink_is_skipped() {
        let mut params = ParamSet::new();
        let theta = params.add("theta", Tensor::row_vector(vec![0.0, 2.0]));
        let report = check_gradients(
            |t, p| {
                let x = t.param(p, theta);
                let r = t.relu(x);
                t.sum(r)
            },
            &params,
            1e-5,
        );
        assert_eq!(report.skipped, 1);
        assert_eq!(report.checked, 1);
        assert!(report.max_rel_error < 1e-9);
    }
}
