use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many randomly chosen entries of each input.
    pub max_entries_per_input: Option<usize>,
    pub seed: u64,
    /// Smallest step tried when a central difference straddles a ReLU or clamp kink.
    pub min_step: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_entries_per_input: None,
            seed: 0,
            min_step: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub checked: usize,
    /// Entries whose difference had to be retaken with a smaller step.
    pub kink_retries: usize,
}

/// Max over entries of `|analytic - central difference| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let opts = GradCheckOptions {
        step,
        ..Default::default()
    };
    grad_check_with(f, inputs, &opts).map(|r| r.max_rel_error)
}

pub fn grad_check_with<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::invalid("grad_check", format!("step must be positive, got {}", opts.step)));
    }
    let eval = |ins: &[Tensor]| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if !v.is_scalar() {
            return Err(Error::NonScalarRoot(v.shape().to_vec()));
        }
        let y = v.item();
        if y.is_nan() {
            return Err(Error::NanInput("grad_check"));
        }
        Ok((y, g.kink_signature()))
    };

    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.backward(out)?;
        vars.iter().map(|&v| g.grad(v).cloned().unwrap()).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let entries: Vec<usize> = match opts.max_entries_per_input {
            Some(m) if m < input.len() => sample(&mut rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for j in entries {
            let x0 = input.data()[j];
            let mut h = opts.step;
            let mut retried = false;
            let numeric = loop {
                work[k].data_mut()[j] = x0 + h;
                let (fp, sp) = eval(&work)?;
                work[k].data_mut()[j] = x0 - h;
                let (fm, sm) = eval(&work)?;
                work[k].data_mut()[j] = x0;
                let smooth = sp == sm && {
                    let (_, s0) = eval(&work)?;
                    s0 == sp
                };
                if smooth || h / 10.0 < opts.min_step {
                    break (fp - fm) / (2.0 * h);
                }
                h /= 10.0;
                retried = true;
            };
            report.kink_retries += retried as usize;
            let a = analytic[k].data()[j];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = err;
                report.worst_input = k;
                report.worst_index = j;
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
