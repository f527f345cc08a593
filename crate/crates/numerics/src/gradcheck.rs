//! Centered finite-difference gradient verification.
//!
//! The numeric side only ever runs forward passes, so it stays independent
//! of every backward rule it checks.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Mode, Var};
use crate::param::ParamStore;
use crate::tensor::Tensor;
use crate::Result;

/// Finite-difference step used throughout the test suite.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const MAGNITUDE_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, MAGNITUDE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if self.checked == 1 || e > self.max_rel_error {
            self.max_rel_error = e;
            self.worst = format!("{} (analytic {analytic:.6e}, numeric {numeric:.6e})", what());
        }
    }
}

fn scalar_of(g: &Graph<'_, f64>, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Checks gradients w.r.t. every coordinate of the given differentiable
/// inputs. `f` builds a scalar loss from the input nodes.
pub fn check_inputs<F>(store: &ParamStore<f64>, inputs: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new(store, Mode::Eval, 0);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(scalar_of(&g, loss))
    };

    let mut g = Graph::new(store, Mode::Eval, 0);
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport::default();
    let mut xs = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.wrt(*v).unwrap_or(&zero).clone();
        for c in 0..inputs[i].numel() {
            let orig = xs[i].data()[c];
            xs[i].data_mut()[c] = orig + STEP;
            let up = eval(&xs)?;
            xs[i].data_mut()[c] = orig - STEP;
            let down = eval(&xs)?;
            xs[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            report.record(|| format!("input {i}[{c}]"), analytic.data()[c], numeric);
        }
    }
    Ok(report)
}

/// Checks parameter gradients. With `per_param = Some(n)`, at most `n`
/// randomly chosen coordinates of each parameter are checked; with `None`
/// every coordinate is.
pub fn check_params<F>(
    store: &mut ParamStore<f64>,
    per_param: Option<usize>,
    seed: u64,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let analytic: Vec<(crate::param::ParamId, Tensor<f64>)> = {
        let mut g = Graph::new(&*store, Mode::Eval, 0);
        let loss = f(&mut g)?;
        let grads = g.backward(loss)?;
        store
            .iter()
            .map(|(id, p)| {
                let t = grads.param(id).cloned().unwrap_or_else(|| Tensor::zeros(p.value.shape()));
                (id, t)
            })
            .collect()
    };

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new(store, Mode::Eval, 0);
        let loss = f(&mut g)?;
        Ok(scalar_of(&g, loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport::default();
    for (id, grad) in analytic {
        let n = grad.numel();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = store.get(id).value.data()[c];
            store.get_mut(id).value.data_mut()[c] = orig + STEP;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = orig - STEP;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let name = store.get(id).name.clone();
            report.record(|| format!("{name}[{c}]"), grad.data()[c], numeric);
        }
    }
    Ok(report)
}
