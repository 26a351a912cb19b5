//! Finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::param::{ParamId, ParamStore};
use super::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub h: f64,
    /// Parameters with more entries than this are checked on a random subset.
    pub max_coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            max_coords_per_param: usize::MAX,
            seed: 0,
        }
    }
}

/// Steps are divided by this factor while a stencil straddles a kink.
const REFINE_FACTOR: f64 = 4.0;
const MAX_REFINEMENTS: usize = 12;

/// Outcome of [`grad_check_piecewise`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose step had to shrink to stay on one smooth piece.
    pub refined: usize,
    /// Coordinates still straddling a kink at the smallest step.
    pub unresolved: usize,
}

type Branch<'a> = &'a mut dyn FnMut(&ParamStore) -> Result<u64>;

fn run<F>(
    params: &mut ParamStore,
    opts: &GradCheckOptions,
    mut loss: F,
    mut branch: Option<Branch<'_>>,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<(ParamId, Tensor)>)>,
{
    let (_, analytic) = loss(params)?;
    let mut totals: Vec<Tensor> = params
        .iter()
        .map(|p| Tensor::zeros(p.value.shape()))
        .collect();
    for (id, g) in &analytic {
        totals[id.0].add_assign(g);
    }
    let base = match branch.as_mut() {
        Some(b) => Some(b(params)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        refined: 0,
        unresolved: 0,
    };
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        let n = params.value(id).len();
        let coords: Vec<usize> = if n <= opts.max_coords_per_param {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let orig = params.value(id).data()[k];
            let mut h = opts.h;
            if let (Some(b), Some(sig)) = (branch.as_mut(), base) {
                let mut tries = 0;
                loop {
                    params.get_mut(id).value.data_mut()[k] = orig + h;
                    let same = b(params)? == sig && {
                        params.get_mut(id).value.data_mut()[k] = orig - h;
                        b(params)? == sig
                    };
                    if same {
                        break;
                    }
                    if tries == MAX_REFINEMENTS {
                        report.unresolved += 1;
                        break;
                    }
                    tries += 1;
                    h /= REFINE_FACTOR;
                }
                report.refined += usize::from(tries > 0);
            }
            params.get_mut(id).value.data_mut()[k] = orig + h;
            let (fp, _) = loss(params)?;
            params.get_mut(id).value.data_mut()[k] = orig - h;
            let (fm, _) = loss(params)?;
            params.get_mut(id).value.data_mut()[k] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = totals[id.0].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Largest relative error between the analytic gradient of `loss` and
/// central differences `(f(x+h) − f(x−h)) / 2h`, over the checked coordinates.
///
/// `loss` evaluates the scalar at the current parameter values together with
/// its analytic parameter gradients (entries for the same id are summed). The
/// denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &mut ParamStore, opts: &GradCheckOptions, loss: F) -> Result<f64>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<(ParamId, Tensor)>)>,
{
    run(params, opts, loss, None).map(|r| r.max_rel_error)
}

/// [`grad_check`] for piecewise-smooth losses. `branch` returns a signature of
/// the discrete choices (ReLU signs, max winners, ...) taken at the given
/// parameters. While the signature at `x ± h` differs from the one at `x`, the
/// stencil crosses a kink and `h` is divided by 4, up to 12 times.
pub fn grad_check_piecewise<F, B>(
    params: &mut ParamStore,
    opts: &GradCheckOptions,
    loss: F,
    mut branch: B,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Vec<(ParamId, Tensor)>)>,
    B: FnMut(&ParamStore) -> Result<u64>,
{
    run(params, opts, loss, Some(&mut branch))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;

    #[test]
    fn quadratic_loss_is_checked_tightly() {
        let mut s = ParamStore::new();
        let id = s
            .add("x", Tensor::vector(vec![0.3, -1.7, 2.5, 0.01]).unwrap())
            .unwrap();
        let err = grad_check(&mut s, &GradCheckOptions::default(), |p| {
            let mut g = Graph::new();
            let x = g.param(p, id);
            let l = g.sum_squares(x);
            let grads = g.backward(l)?;
            let out = grads.params().map(|(i, t)| (i, t.clone())).collect();
            Ok((g.scalar(l), out))
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let mut s = ParamStore::new();
        s.add("x", Tensor::vector(vec![1.0, 2.0]).unwrap()).unwrap();
        let err = grad_check(&mut s, &GradCheckOptions::default(), |_| {
            Ok((4.2, Vec::new()))
        })
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::vector(vec![1.0]).unwrap()).unwrap();
        let err = grad_check(&mut s, &GradCheckOptions::default(), |p| {
            let x = p.value(id).data()[0];
            Ok((x * x, vec![(id, Tensor::scalar(3.0 * x))]))
        })
        .unwrap();
        assert!(err > 0.3);
    }

    #[test]
    fn sampling_restores_parameter_values() {
        let mut s = ParamStore::new();
        let id = s
            .add(
                "x",
                Tensor::vector((0..50).map(|i| i as f64 * 0.1).collect()).unwrap(),
            )
            .unwrap();
        let before = s.value(id).clone();
        let opts = GradCheckOptions {
            max_coords_per_param: 5,
            ..GradCheckOptions::default()
        };
        grad_check(&mut s, &opts, |p| {
            let sum: f64 = p.value(id).data().iter().sum();
            Ok((sum, vec![(id, Tensor::vector(vec![1.0; 50]).unwrap())]))
        })
        .unwrap();
        assert_eq!(s.value(id), &before);
    }

    fn abs_loss(p: &ParamStore, id: ParamId) -> Result<(f64, Vec<(ParamId, Tensor)>)> {
        let x = p.value(id).data()[0];
        Ok((x.abs(), vec![(id, Tensor::scalar(x.signum()))]))
    }

    #[test]
    fn kink_inside_the_stencil_is_refined_away() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::vector(vec![3e-6]).unwrap()).unwrap();
        let opts = GradCheckOptions::default();
        let plain = grad_check(&mut s, &opts, |p| abs_loss(p, id)).unwrap();
        assert!(plain > 0.1, "{plain}");
        let r = grad_check_piecewise(
            &mut s,
            &opts,
            |p| abs_loss(p, id),
            |p| Ok(u64::from(p.value(id).data()[0] > 0.0)),
        )
        .unwrap();
        assert_eq!((r.checked, r.refined, r.unresolved), (1, 1, 0));
        assert!(r.max_rel_error < 1e-12, "{r:?}");
        assert_eq!(s.value(id).data(), &[3e-6]);
    }

    #[test]
    fn kink_at_the_point_stays_unresolved() {
        let mut s = ParamStore::new();
        let id = s.add("x", Tensor::vector(vec![0.0]).unwrap()).unwrap();
        let r = grad_check_piecewise(
            &mut s,
            &GradCheckOptions::default(),
            |p| abs_loss(p, id),
            |p| {
                Ok(p.value(id).data()[0]
                    .partial_cmp(&0.0)
                    .map_or(9, |o| o as i8 as u64))
            },
        )
        .unwrap();
        assert_eq!(r.unresolved, 1);
    }
}
