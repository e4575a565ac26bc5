//! Central finite-difference verification of analytic gradients (`f64`).

use rand::seq::index::sample;

use super::{Grads, Mat, ParamStore};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Maximum relative error over all checked entries.
    pub max_rel: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    /// Worst relative error per parameter, in store order.
    pub per_param: Vec<(String, f64)>,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the gradients returned by `f` against central differences.
/// Parameters with more than `max_per_param` entries are checked on a seeded
/// random subset of that size.
pub fn grad_check<F>(ps: &ParamStore<f64>, f: F, eps: f64, max_per_param: usize, seed: u64) -> GradCheckReport
where
    F: Fn(&ParamStore<f64>) -> (f64, Grads<f64>),
{
    grad_check_steps(ps, f, &[eps], max_per_param, seed)
}

/// [`grad_check`] over several step sizes, largest first. Each entry takes
/// the larger step of the adjacent pair with the smallest estimated error,
/// so neither round-off (tiny steps on tiny gradients) nor kinks (large
/// steps across a ReLU or max) decide the estimate.
pub fn grad_check_steps<F>(ps: &ParamStore<f64>, f: F, steps: &[f64], max_per_param: usize, seed: u64) -> GradCheckReport
where
    F: Fn(&ParamStore<f64>) -> (f64, Grads<f64>),
{
    assert!(!steps.is_empty(), "need at least one step size");
    let (loss, analytic) = f(ps);
    let mut work = ps.clone();
    let mut r = crate::rng::rng(seed);
    let mut rep = GradCheckReport::default();
    for (pi, name) in ps.names().iter().enumerate() {
        let n = ps.values()[pi].data.len();
        let idx: Vec<usize> = if n > max_per_param {
            let mut v = sample(&mut r, n, max_per_param).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        let mut worst = 0.0f64;
        for i in idx {
            let orig = work.values()[pi].data[i];
            let est: Vec<f64> = steps
                .iter()
                .map(|&h| {
                    work.values_mut()[pi].data[i] = orig + h;
                    let lp = f(&work).0;
                    work.values_mut()[pi].data[i] = orig - h;
                    let lm = f(&work).0;
                    (lp - lm) / (2.0 * h)
                })
                .collect();
            work.values_mut()[pi].data[i] = orig;
            let num = match est.len() {
                1 => est[0],
                _ => {
                    // disagreement within a pair plus the round-off floor of its smaller step
                    let err = |k: usize| (est[k] - est[k + 1]).abs() + f64::EPSILON * loss.abs() / steps[k + 1];
                    let k = (0..est.len() - 1).min_by(|&a, &b| err(a).total_cmp(&err(b))).unwrap_or(0);
                    est[k]
                }
            };
            let e = rel_error(analytic.0[pi].data[i], num);
            rep.checked += 1;
            worst = worst.max(e);
            if e > rep.max_rel {
                rep.max_rel = e;
                rep.worst = Some((name.clone(), i));
            }
        }
        rep.per_param.push((name.clone(), worst));
    }
    rep
}

/// Same check for the gradient with respect to an input matrix.
pub fn input_grad_check<F>(x: &Mat<f64>, f: F) -> f64
where
    F: Fn(&Mat<f64>) -> (f64, Mat<f64>),
{
    let eps = 1e-5;
    let (_, analytic) = f(x);
    let mut work = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.data.len() {
        let orig = work.data[i];
        work.data[i] = orig + eps;
        let lp = f(&work).0;
        work.data[i] = orig - eps;
        let lm = f(&work).0;
        work.data[i] = orig;
        worst = worst.max(rel_error(analytic.data[i], (lp - lm) / (2.0 * eps)));
    }
    worst
}
