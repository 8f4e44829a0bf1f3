//! Central finite-difference verification of analytic gradients.
//!
//! Runs in 64-bit only. For each parameter tensor a seeded sample of
//! coordinates is perturbed by `±h`; the numeric slope
//! `(f(p+h) - f(p-h)) / 2h` is compared with the gradient returned by
//! [`Graph::backward`]. A coordinate whose perturbation flips any PReLU input
//! across zero is reported as skipped: the loss is not differentiable there.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

/// Denominator floor of the relative error.
pub const REL_EPS: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_EPS)
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked in full.
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            coords_per_param: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CoordPair {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<CoordPair>,
    /// Largest analytic gradient magnitude seen among checked coordinates.
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GroupCheck {
    pub group: String,
    pub tensors: usize,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradReport {
    pub step: f64,
    pub params: Vec<ParamCheck>,
    /// Perturbations whose loss was non-finite (`name[index]: reason`).
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.failures.is_empty() && self.max_rel_error() < tolerance
    }

    pub fn param(&self, name: &str) -> Option<&ParamCheck> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Per-group summary in order of first appearance. A parameter's group is
    /// the part of its name before `/`.
    pub fn groups(&self) -> Vec<GroupCheck> {
        let mut out: Vec<GroupCheck> = Vec::new();
        for p in &self.params {
            let group = group_of(&p.name);
            let idx = match out.iter().position(|g| g.group == group) {
                Some(i) => i,
                None => {
                    out.push(GroupCheck {
                        group: group.to_string(),
                        tensors: 0,
                        checked: 0,
                        skipped: 0,
                        max_rel_error: 0.0,
                        max_abs_grad: 0.0,
                    });
                    out.len() - 1
                }
            };
            let g = &mut out[idx];
            g.tensors += 1;
            g.checked += p.checked;
            g.skipped += p.skipped;
            g.max_rel_error = g.max_rel_error.max(p.max_rel_error);
            g.max_abs_grad = g.max_abs_grad.max(p.max_abs_grad);
        }
        out
    }
}

pub fn group_of(name: &str) -> &str {
    name.split_once('/').map_or(name, |(g, _)| g)
}

enum Probe {
    Value(f64, Vec<i8>),
    Failed(String),
}

/// Compares analytic and central-difference gradients for every tensor in
/// `store`. `loss` rebuilds the forward graph from the given parameters and
/// returns it with its scalar loss node.
pub fn grad_check<F>(
    store: &ParamStore<f64>,
    mut loss: F,
    options: GradCheckOptions,
) -> Result<GradReport>
where
    F: FnMut(&ParamStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    if options.step.is_nan() || options.step <= 0.0 {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let (graph, out) = loss(store)?;
    let analytic = graph.backward(out, store)?;
    let base_pattern = graph.kink_pattern();
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe_store = store.clone();
    let mut report = GradReport {
        step: options.step,
        params: Vec::with_capacity(store.len()),
        failures: Vec::new(),
    };

    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let numel = store.get(id).data().len();
        let mut coords: Vec<usize> = if numel <= options.coords_per_param {
            (0..numel).collect()
        } else {
            sample(&mut rng, numel, options.coords_per_param).into_vec()
        };
        coords.sort_unstable();

        let mut check = ParamCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst: None,
            max_abs_grad: 0.0,
        };
        for &index in &coords {
            let original = store.get(id).data()[index];
            let mut probe = |value: f64| -> Probe {
                probe_store.get_mut(id).data_mut()[index] = value;
                let result = loss(&probe_store)
                    .map(|(g, v)| (g.value(v).item(), g.kink_pattern()));
                probe_store.get_mut(id).data_mut()[index] = original;
                match result {
                    Ok((v, _)) if !v.is_finite() => Probe::Failed("non-finite loss".into()),
                    Ok((v, pattern)) => Probe::Value(v, pattern),
                    Err(e) => Probe::Failed(e.to_string()),
                }
            };
            let plus = probe(original + options.step);
            let minus = probe(original - options.step);
            let (f_plus, p_plus, f_minus, p_minus) = match (plus, minus) {
                (Probe::Value(a, pa), Probe::Value(b, pb)) => (a, pa, b, pb),
                (Probe::Failed(reason), _) | (_, Probe::Failed(reason)) => {
                    report.failures.push(format!("{name}[{index}]: {reason}"));
                    continue;
                }
            };
            if p_plus != base_pattern || p_minus != base_pattern {
                check.skipped += 1;
                continue;
            }
            let numeric = (f_plus - f_minus) / (2.0 * options.step);
            let a = analytic.get(id).data()[index];
            let rel = relative_error(a, numeric);
            check.checked += 1;
            check.max_abs_error = check.max_abs_error.max((a - numeric).abs());
            check.max_abs_grad = check.max_abs_grad.max(a.abs());
            if check.worst.is_none() || rel > check.max_rel_error {
                check.max_rel_error = rel;
                check.worst = Some(CoordPair {
                    index,
                    analytic: a,
                    numeric,
                });
            }
        }
        report.params.push(check);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_store(w: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(w)).unwrap();
        store
    }

    #[test]
    fn quadratic_is_tight() {
        let store = scalar_store(3.0);
        let report = grad_check(
            &store,
            |s| {
                let mut g = Graph::new();
                let w = g.param(s, s.id("w").unwrap())?;
                let loss = g.mul(w, w)?;
                Ok((g, loss))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(report.params[0].checked, 1);
        assert!(report.max_rel_error() < 1e-9, "{report:?}");
    }

    #[test]
    fn prelu_kink_is_skipped() {
        let mut store = scalar_store(0.0);
        store.register("slope", Tensor::scalar(0.25)).unwrap();
        let report = grad_check(
            &store,
            |s| {
                let mut g = Graph::new();
                let w = g.param(s, s.id("w").unwrap())?;
                let a = g.param(s, s.id("slope").unwrap())?;
                let loss = g.prelu(w, a)?;
                Ok((g, loss))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        let w = report.param("w").unwrap();
        assert_eq!((w.checked, w.skipped), (0, 1));
    }

    #[test]
    fn non_finite_perturbation_is_reported() {
        // loss = 1 / w is finite at w = 1e-6 but not at w = 0 (w - h with h = 1e-6)
        let store = scalar_store(1e-6);
        let report = grad_check(
            &store,
            |s| {
                let mut g = Graph::new();
                let w = g.param(s, s.id("w").unwrap())?;
                let y = g.value(w).map(|v| 1.0 / v);
                let c = g.constant(y)?;
                let loss = g.mul(w, c)?;
                Ok((g, loss))
            },
            GradCheckOptions {
                step: 1e-6,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(report.failures.len(), 1);
        assert!(!report.passed(1e-4));
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
    }
}
