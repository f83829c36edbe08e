//! Central-difference verification of analytic gradients.

use rand::Rng;

use super::params::ParameterTree;
use super::rng::{SeededRng, Stream};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Finite-difference step, must lie in `[1e-5, 1e-3]`.
    pub step: f64,
    /// Number of coordinates to probe. Coordinates are dealt round-robin over
    /// parameters (in name order) so every parameter gets probed once before
    /// any gets a second probe.
    pub coordinates: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-4,
            coordinates: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub checked: usize,
    /// Names of every parameter that received at least one probe.
    pub probed_params: Vec<String>,
}

/// Compares analytic gradients of `f` with central differences.
///
/// `f(θ, want_grad)` returns the scalar loss and, when `want_grad` is set,
/// the gradient tree. The reported error per coordinate is
/// `|analytic − numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(mut f: F, theta: &ParameterTree<f64>, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterTree<f64>, bool) -> Result<(f64, Option<ParameterTree<f64>>)>,
{
    if !(1e-5..=1e-3).contains(&opts.step) {
        return Err(Error::Config(format!(
            "finite-difference step {} outside [1e-5, 1e-3]",
            opts.step
        )));
    }
    let (loss, grads) = f(theta, true)?;
    let grads = grads.ok_or_else(|| Error::Contract("objective returned no gradients".into()))?;
    grads.check_same_layout(theta)?;
    if !loss.is_finite() {
        let name = grads
            .iter()
            .find(|(_, g)| !g.all_finite())
            .map(|(n, _)| n.clone())
            .unwrap_or_else(|| "<none>".into());
        return Err(Error::NonFinite(format!(
            "loss is {loss}; first non-finite gradient in {name}"
        )));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name} is not finite")));
    }

    let names: Vec<String> = theta.names().cloned().collect();
    let mut rng = SeededRng::new(opts.seed, Stream::Eval);
    let mut probe = theta.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        checked: 0,
        probed_params: Vec::new(),
    };
    for k in 0..opts.coordinates {
        let name = &names[k % names.len()];
        let numel = theta.require(name)?.numel();
        let idx = rng.random_range(0..numel);
        let orig = theta.require(name)?.data()[idx];

        probe.get_mut(name).unwrap().data_mut()[idx] = orig + opts.step;
        let (up, _) = f(&probe, false)?;
        probe.get_mut(name).unwrap().data_mut()[idx] = orig - opts.step;
        let (down, _) = f(&probe, false)?;
        probe.get_mut(name).unwrap().data_mut()[idx] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("perturbed loss at {name}[{idx}]")));
        }

        let numeric = (up - down) / (2.0 * opts.step);
        let analytic = grads.require(name)?.data()[idx];
        let err = (analytic - numeric).abs() / numeric.abs().max(1.0);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst_param = name.clone();
            report.worst_index = idx;
        }
        report.checked += 1;
        if k < names.len() {
            report.probed_params.push(name.clone());
        }
    }
    Ok(report)
}
