//! Central finite-difference checking of graph gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::graph::{Graph, Var};
use crate::nn::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Uniform `[-1, 1)` tensor from a seed.
pub fn rand_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-1.0..1.0)))
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: usize,
    /// Probes discarded because the +/- step crossed a non-differentiable point.
    pub kink_skips: usize,
    /// First few failing entries, `label: analytic vs numeric`.
    pub failed: Vec<String>,
}

impl GradReport {
    fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, tol: f64) {
        let diff = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        self.checked += 1;
        // Entries whose true gradient is below the finite-difference noise
        // floor are compared absolutely.
        let ok = rel <= tol || diff <= 1e-7;
        if !ok {
            self.failures += 1;
            if self.failed.len() < 8 {
                self.failed.push(format!("{}: {analytic:.6e} vs {numeric:.6e}", label()));
            }
        }
        if scale > 1e-7 {
            self.max_rel_err = self.max_rel_err.max(rel);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }

    pub fn merge(&mut self, o: GradReport) {
        self.checked += o.checked;
        self.failures += o.failures;
        self.kink_skips += o.kink_skips;
        self.max_rel_err = self.max_rel_err.max(o.max_rel_err);
        self.failed.extend(o.failed);
    }
}

pub const FD_STEP: f64 = 1e-4;

/// Checks `d f / d inputs` for every entry of every input.
pub fn input_grad_report(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
    tol: f64,
) -> GradReport {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        (g.value(out).data()[0], g.kink_signature())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let base_sig = g.kink_signature();
    let mut report = GradReport::default();
    for (k, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(&g, v);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let ((fp, sp), (fm, sm)) = (eval(&plus), eval(&minus));
            if sp != base_sig || sm != base_sig {
                report.kink_skips += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_STEP);
            report.record(|| format!("input {k}[{i}]"), analytic.data()[i], numeric, tol);
        }
    }
    report
}

/// Asserting wrapper around [`input_grad_report`].
pub fn check_input_grad(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[Var]) -> Var, tol: f64) {
    let r = input_grad_report(inputs, f, tol);
    assert!(r.passed(), "gradient check failed: {r:?}");
}

/// Checks parameter gradients, probing `per_tensor` random entries of each
/// parameter tensor (every entry when the tensor is that small). Probes whose
/// step crosses a kink are redrawn, up to a bounded number of attempts.
pub fn param_grad_report(
    store: &ParamStore<f64>,
    f: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
    per_tensor: usize,
    tol: f64,
    seed: u64,
) -> GradReport {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let pg = g.param_grads(&grads, store);
    let base_sig = g.kink_signature();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut work = store.clone();
    let eval = |work: &ParamStore<f64>| {
        let mut g = Graph::new();
        let o = f(&mut g, work);
        (g.value(o).data()[0], g.kink_signature())
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let exhaustive = n <= per_tensor;
        let mut done = 0;
        let mut attempts = 0;
        while done < per_tensor.min(n) && attempts < 4 * per_tensor.max(1) + n.min(per_tensor) {
            let i = if exhaustive { attempts } else { rng.random_range(0..n) };
            attempts += 1;
            if exhaustive && i >= n {
                break;
            }
            let orig = store.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + FD_STEP;
            let (fp, sp) = eval(&work);
            work.get_mut(id).data_mut()[i] = orig - FD_STEP;
            let (fm, sm) = eval(&work);
            work.get_mut(id).data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                report.kink_skips += 1;
                continue;
            }
            let analytic = pg.get(id).map(|t| t.data()[i]).unwrap_or(0.0);
            report.record(|| format!("{}[{i}]", store.name(id)), analytic, (fp - fm) / (2.0 * FD_STEP), tol);
            done += 1;
        }
    }
    report
}
