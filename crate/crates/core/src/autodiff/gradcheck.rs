use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{Grads, ParamId, ParamSet};
use crate::error::Result;
use crate::rng;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// How the numeric derivative of one coordinate is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difference {
    /// `(f(x + eps) - f(x - eps)) / 2eps`.
    #[default]
    Central,
    /// One Richardson step over central differences at `eps` and `2 eps`:
    /// `(4 D(eps) - D(2 eps)) / 3`. The eps^2 truncation term cancels, so a
    /// larger step can be used and rounding noise in the loss shrinks with it.
    Richardson,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    pub eps: f64,
    pub samples_per_tensor: usize,
    pub seed: u64,
    pub difference: Difference,
}

/// Compares `analytic` gradients against central differences of `loss_fn`.
///
/// Tensors with more than `samples_per_tensor` entries are checked on a
/// seeded random subset of that size. The error of one coordinate is
/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn finite_diff_check<F>(
    params: &ParamSet,
    analytic: &Grads,
    mut loss_fn: F,
    eps: f64,
    samples_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let opts = FdOptions {
        eps,
        samples_per_tensor,
        seed,
        difference: Difference::Central,
    };
    finite_diff_check_with(params, analytic, |p, _| loss_fn(p), &opts)
}

/// [`finite_diff_check`] with a choice of difference scheme. `loss_fn` is
/// also told which tensor is perturbed, so callers can reuse work that does
/// not depend on it.
pub fn finite_diff_check_with<F>(
    params: &ParamSet,
    analytic: &Grads,
    mut loss_fn: F,
    opts: &FdOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet, ParamId) -> Result<f64>,
{
    let mut work = params.clone();
    let mut rng = rng::seeded(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let len = params.get(id).len();
        let coords: Vec<usize> = if len <= opts.samples_per_tensor {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, opts.samples_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = params.get(id).data()[i];
            let mut central = |h: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[i] = orig + h;
                let plus = loss_fn(&work, id)?;
                work.get_mut(id).data_mut()[i] = orig - h;
                let minus = loss_fn(&work, id)?;
                work.get_mut(id).data_mut()[i] = orig;
                Ok((plus - minus) / (2.0 * h))
            };
            let numeric = match opts.difference {
                Difference::Central => central(opts.eps)?,
                Difference::Richardson => (4.0 * central(opts.eps)? - central(2.0 * opts.eps)?) / 3.0,
            };
            let a = analytic.get(id).data()[i];
            let err = libm::fabs(a - numeric) / f64::max(1e-8, libm::fabs(a) + libm::fabs(numeric));
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((String::from(params.name(id)), i));
                }
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Fault, Graph, Tensor};
    use alloc::vec;

    fn quad_params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap())
            .unwrap();
        p.insert("x", Tensor::matrix(4, 2, (0..8).map(|i| 0.3 - i as f64 * 0.07).collect()).unwrap())
            .unwrap();
        p
    }

    fn quad_loss(p: &ParamSet, grads: Option<&mut Grads>) -> Result<f64> {
        let mut g = Graph::new();
        let w = g.param(p, p.id("w").unwrap());
        let x = g.param(p, p.id("x").unwrap());
        let y = g.matmul(w, x)?;
        let sq = g.mul(y, y)?;
        let loss = g.sum(sq);
        if let Some(grads) = grads {
            g.backward(loss)?;
            g.accumulate_param_grads(grads);
        }
        Ok(g.value(loss).item())
    }

    #[test]
    fn matmul_gradient_matches_differences() {
        let p = quad_params();
        let mut grads = p.zero_grads();
        quad_loss(&p, Some(&mut grads)).unwrap();
        let report = finite_diff_check(&p, &grads, |q| quad_loss(q, None), 1e-5, 64, 7).unwrap();
        assert_eq!(report.checked, 20);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    fn softmax_loss(p: &ParamSet, fault: Option<Fault>, grads: Option<&mut Grads>) -> Result<f64> {
        let mut g = fault.map(Graph::with_fault).unwrap_or_default();
        let w = g.param(p, p.id("w").unwrap());
        let s = g.softmax(w);
        let target = g.constant(Tensor::matrix(3, 4, vec![0.5; 12]).unwrap());
        let prod = g.mul(s, target)?;
        let sq = g.mul(prod, s)?;
        let loss = g.sum(sq);
        if let Some(grads) = grads {
            g.backward(loss)?;
            g.accumulate_param_grads(grads);
        }
        Ok(g.value(loss).item())
    }

    #[test]
    fn corrupted_rule_is_detected() {
        let p = quad_params();
        let mut good = p.zero_grads();
        softmax_loss(&p, None, Some(&mut good)).unwrap();
        let ok = finite_diff_check(&p, &good, |q| softmax_loss(q, None, None), 1e-5, 64, 1).unwrap();
        assert!(ok.max_rel_error < 1e-6, "{ok:?}");

        let mut bad = p.zero_grads();
        softmax_loss(&p, Some(Fault::Softmax), Some(&mut bad)).unwrap();
        let broken = finite_diff_check(&p, &bad, |q| softmax_loss(q, None, None), 1e-5, 64, 1).unwrap();
        assert!(broken.max_rel_error > 1e-2, "{broken:?}");
    }

    #[test]
    fn richardson_is_exact_for_cubics() {
        let mut p = ParamSet::new();
        p.insert("x", Tensor::matrix(1, 3, vec![0.7, -1.3, 2.1]).unwrap()).unwrap();
        let cubic = |q: &ParamSet, _| -> Result<f64> { Ok(q.by_name("x").unwrap().data().iter().map(|v| v * v * v).sum()) };
        let mut grads = p.zero_grads();
        let id = p.id("x").unwrap();
        for (g, v) in grads.get_mut(id).data_mut().iter_mut().zip(p.get(id).data()) {
            *g = 3.0 * v * v;
        }
        let opts = |difference| FdOptions {
            eps: 1e-2,
            samples_per_tensor: 64,
            seed: 0,
            difference,
        };
        let central = finite_diff_check_with(&p, &grads, cubic, &opts(Difference::Central)).unwrap();
        let richardson = finite_diff_check_with(&p, &grads, cubic, &opts(Difference::Richardson)).unwrap();
        assert!(central.max_rel_error > 1e-6, "{central:?}");
        assert!(richardson.max_rel_error < 1e-12, "{richardson:?}");
    }
}
