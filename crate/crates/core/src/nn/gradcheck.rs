//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{FobaError, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates probed per tensor; larger tensors are subsampled.
    pub max_coords: usize,
    /// Coordinates whose gradient is below this fraction of the tensor's
    /// largest analytic gradient are compared against that fraction instead.
    pub scale_floor: f64,
    /// Absolute lower bound on the comparison scale, for gradients small
    /// enough to drown in rounding noise of the difference quotient.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            max_coords: 48,
            scale_floor: 1e-3,
            abs_floor: 0.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `(tensor label, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, idx: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor).max(1e-12);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if self.worst.is_none() || rel > self.max_rel_err {
            self.max_rel_err = rel;
            self.worst = Some((label.to_string(), idx, analytic, numeric));
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn probe_indices(n: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    if n <= opts.max_coords {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx = sample(&mut rng, n, opts.max_coords).into_vec();
    idx.sort_unstable();
    idx
}

fn checked_grad(g: Option<&Tensor<f64>>, shape: &[usize], label: &str) -> Result<Tensor<f64>> {
    let g = g.cloned().unwrap_or_else(|| Tensor::zeros(shape));
    if !g.all_finite() {
        return Err(FobaError::NonFiniteGradient(label.to_string()));
    }
    Ok(g)
}

/// Compares the gradient of a scalar function of explicit input tensors.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, &v) in vars.iter().enumerate() {
        let label = format!("input{ti}");
        let analytic = checked_grad(grads.get(v), inputs[ti].shape(), &label)?;
        let floor = (opts.scale_floor * analytic.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))).max(opts.abs_floor);
        for i in probe_indices(inputs[ti].numel(), opts, ti as u64) {
            let orig = work[ti].data()[i];
            work[ti].data_mut()[i] = orig + opts.step;
            let fp = eval(&work)?;
            work[ti].data_mut()[i] = orig - opts.step;
            let fm = eval(&work)?;
            work[ti].data_mut()[i] = orig;
            report.record(&label, i, analytic.data()[i], (fp - fm) / (2.0 * opts.step), floor);
        }
    }
    Ok(report)
}

/// Compares parameter gradients of a scalar function built over a parameter store.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::with_params(s);
        let out = f(&mut g)?;
        Ok(g.value(out).data()[0])
    };
    let analytic: Vec<(usize, Tensor<f64>)> = {
        let mut g = Graph::with_params(store);
        let out = f(&mut g)?;
        let grads = g.backward(out)?;
        let mut v = Vec::new();
        for (id, p) in store.iter() {
            if p.trainable {
                v.push((id.0, checked_grad(grads.param(id), p.value.shape(), &p.name)?));
            }
        }
        v
    };
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (pi, grad) in analytic {
        let id = crate::nn::params::ParamId(pi);
        let name = store.get(id).name.clone();
        let floor = (opts.scale_floor * grad.data().iter().fold(0.0f64, |m, x| m.max(x.abs()))).max(opts.abs_floor);
        for i in probe_indices(grad.numel(), opts, pi as u64) {
            let orig = work.get(id).value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + opts.step;
            let fp = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - opts.step;
            let fm = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            report.record(&name, i, grad.data()[i], (fp - fm) / (2.0 * opts.step), floor);
        }
    }
    Ok(report)
}
