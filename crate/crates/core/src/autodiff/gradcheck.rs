//! Central-difference verification of analytic gradients.

use std::fmt;

use crate::autodiff::graph::{Graph, ValueId};
use crate::autodiff::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Half-width of the central difference.
    pub eps: f64,
    /// Largest acceptable relative error.
    pub tolerance: f64,
    /// Denominator floor: `rel = |a - n| / max(|a|, |n|, abs_floor)`.
    pub abs_floor: f64,
    /// Also perturb the graph inputs.
    pub check_inputs: bool,
    /// Number of worst entries kept in the report.
    pub keep_worst: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-4,
            tolerance: 1e-6,
            abs_floor: 1e-6,
            check_inputs: true,
            keep_worst: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose perturbation switched a piecewise branch (activation
    /// sign, pooling winner, probability floor), where the finite difference
    /// does not estimate the derivative.
    pub skipped_branch_changes: usize,
    pub worst: Vec<GradEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.tolerance
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "max rel err {:.3e} over {} entries ({} skipped at branch changes), tolerance {:.1e}: {}",
            self.max_rel_err,
            self.checked,
            self.skipped_branch_changes,
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for e in &self.worst {
            writeln!(
                f,
                "  {}[{}] analytic {:+.6e} numeric {:+.6e} rel {:.3e}",
                e.tensor, e.index, e.analytic, e.numeric, e.rel_err
            )?;
        }
        Ok(())
    }
}

fn objective(graph: &Graph<f64>, out: ValueId, cotangent: &[f64]) -> Result<f64> {
    Ok(graph.value_data(out)?.iter().zip(cotangent).map(|(v, c)| v * c).sum())
}

/// Compare analytic gradients of `sum(cotangent * out)` with central
/// differences for every parameter entry (and input entry, if configured).
/// `cotangent` defaults to all ones.
pub fn gradient_check(
    graph: &mut Graph<f64>,
    inputs: &[Tensor<f64>],
    out: ValueId,
    cotangent: Option<&[f64]>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let was_tracking = graph.branch_fingerprint().is_some();
    graph.set_track_branches(true);
    let refs: Vec<&Tensor<f64>> = inputs.iter().collect();
    graph.forward(&refs)?;
    let base_branch = graph.branch_fingerprint();
    let out_len = graph.value_data(out)?.len();
    let ones = vec![1.0; out_len];
    let cot: Vec<f64> = cotangent.map(|c| c.to_vec()).unwrap_or(ones);

    graph.params_mut().zero_grad();
    let input_grads = graph.backward(&[(out, &cot)])?;

    let mut entries: Vec<GradEntry> = Vec::new();
    let mut skipped = 0;
    let trainable = graph.is_trainable();

    let probe = |graph: &mut Graph<f64>,
                 inputs: &[Tensor<f64>],
                 set: &mut dyn FnMut(&mut Graph<f64>, &mut Vec<Tensor<f64>>, f64)|
     -> Result<Option<f64>> {
        let mut work = inputs.to_vec();
        let mut vals = [0.0; 2];
        for (slot, sign) in [(0, 1.0), (1, -1.0)] {
            set(graph, &mut work, sign * cfg.eps);
            let r: Vec<&Tensor<f64>> = work.iter().collect();
            graph.forward(&r)?;
            let changed = graph.branch_fingerprint() != base_branch;
            vals[slot] = objective(graph, out, &cot)?;
            set(graph, &mut work, -sign * cfg.eps);
            if changed {
                return Ok(None);
            }
        }
        Ok(Some((vals[0] - vals[1]) / (2.0 * cfg.eps)))
    };

    if trainable {
        let n_params = graph.params().len();
        for pi in 0..n_params {
            let name = graph.params().at(pi).name.clone();
            let analytic = graph
                .params()
                .at(pi)
                .tensor
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; graph.params().at(pi).tensor.len()]);
            for (idx, a) in analytic.iter().enumerate() {
                let numeric = probe(graph, inputs, &mut |g, _, d| {
                    g.params_mut().at_mut(pi).tensor.data_mut()[idx] += d;
                })?;
                match numeric {
                    Some(n) => entries.push(entry(&name, idx, *a, n, cfg.abs_floor)),
                    None => skipped += 1,
                }
            }
        }
    }
    if cfg.check_inputs {
        for (ii, grad) in input_grads.iter().enumerate() {
            let name = format!("input{ii}");
            let analytic = grad
                .as_ref()
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; inputs[ii].len()]);
            for (idx, a) in analytic.iter().enumerate() {
                let numeric = probe(graph, inputs, &mut |_, w, d| {
                    w[ii].data_mut()[idx] += d;
                })?;
                match numeric {
                    Some(n) => entries.push(entry(&name, idx, *a, n, cfg.abs_floor)),
                    None => skipped += 1,
                }
            }
        }
    }

    // leave the graph evaluated at the unperturbed point
    graph.forward(&refs)?;
    graph.set_track_branches(was_tracking);

    entries.sort_by(|a, b| b.rel_err.total_cmp(&a.rel_err));
    let max_rel_err = entries.first().map_or(0.0, |e| e.rel_err);
    let checked = entries.len();
    entries.truncate(cfg.keep_worst);
    Ok(GradCheckReport {
        max_rel_err,
        checked,
        skipped_branch_changes: skipped,
        worst: entries,
        tolerance: cfg.tolerance,
    })
}

pub(crate) fn entry(name: &str, index: usize, analytic: f64, numeric: f64, floor: f64) -> GradEntry {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    GradEntry {
        tensor: name.to_string(),
        index,
        analytic,
        numeric,
        rel_err: (analytic - numeric).abs() / denom,
    }
}
