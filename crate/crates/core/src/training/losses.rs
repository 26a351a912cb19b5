//! Loss terms on plain values. The training loop builds the same terms on a
//! graph; these functions evaluate them through identical graph operations.

use crate::error::{ensure, Result};
use crate::tensor::{Graph, Tensor};

use super::spst::PseudoLabelSet;

/// Weights of the mask, source-classification and target-classification terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 100.0,
            beta: 1.0,
            mu: 1.0,
        }
    }
}

impl LossWeights {
    /// Self-supervised only: classification weights zeroed.
    pub fn pretraining(self) -> Self {
        LossWeights {
            beta: 0.0,
            mu: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("mu", self.mu)] {
            ensure!(
                v >= 0.0 && v.is_finite(),
                "loss weight {name} must be non-negative, got {v}"
            );
        }
        Ok(())
    }
}

/// The four loss terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub implicit: f64,
    pub mask: f64,
    pub cls_source: f64,
    pub cls_target: f64,
}

/// Mean absolute error between predicted and target distances.
pub fn loss_implicit(predicted: &[f64], target: &[f64]) -> Result<f64> {
    ensure!(
        !predicted.is_empty(),
        "loss_implicit needs at least one query"
    );
    let mut g = Graph::new();
    let p = g.constant(Tensor::vector(predicted.to_vec())?);
    let l = g.mean_abs_diff(p, target.to_vec())?;
    Ok(g.scalar(l))
}

/// Euclidean (not squared) distance between two latent codes.
pub fn loss_mask(latent_full: &Tensor, latent_masked: &Tensor) -> Result<f64> {
    ensure!(
        latent_full.len() == latent_masked.len(),
        "latent sizes differ: {} vs {}",
        latent_full.len(),
        latent_masked.len()
    );
    let n = latent_full.len();
    let mut g = Graph::new();
    let a = g.constant(latent_full.clone().reshape(vec![1, n])?);
    let b = g.constant(latent_masked.clone().reshape(vec![1, n])?);
    let d = g.row_distance(a, b)?;
    Ok(g.scalar(d))
}

/// Mean cross-entropy of source logits `[B×J]` against one-hot labels.
pub fn loss_cls_source(logits: &Tensor, one_hot: &Tensor) -> Result<f64> {
    crate::tensor::softmax_cross_entropy(logits, one_hot)
}

/// `−(1/N_t)·Σ_selected (log p_ŷ + γ)` for target logits `[N×J]` whose rows
/// match `labels`; unselected rows contribute nothing.
pub fn loss_cls_target(
    logits: &Tensor,
    labels: &PseudoLabelSet,
    gamma: f64,
    total: usize,
) -> Result<f64> {
    ensure!(total >= 1, "target count must be positive");
    ensure!(
        logits.shape().len() == 2 && logits.rows() == labels.len(),
        "{} pseudo labels for logits of shape {:?}",
        labels.len(),
        logits.shape()
    );
    let selected = labels.selected_count();
    if selected == 0 {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let l = g.constant(logits.clone());
    let ce = g.class_cross_entropy(l, labels.labels().to_vec(), total as f64)?;
    Ok(g.scalar(ce) - gamma * selected as f64 / total as f64)
}

/// `L_I + α·L_M + β·L_cls^s + μ·L_cls^t`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    c.implicit + w.alpha * c.mask + w.beta * c.cls_source + w.mu * c.cls_target
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn implicit_examples() {
        let t = [0.0, 0.3, 1.2, 0.05];
        assert_eq!(loss_implicit(&t, &t).unwrap(), 0.0);
        let p: Vec<f64> = t.iter().map(|v| v + 0.1).collect();
        assert!((loss_implicit(&p, &t).unwrap() - 0.1).abs() < 1e-15);
        assert!(loss_implicit(&p, &t[..3]).is_err());
    }

    #[test]
    fn implicit_gradient_is_sign_over_count() {
        let mut g = Graph::new();
        let p = g.variable(Tensor::vector(vec![0.5, -0.2, 3.0, 1.0]).unwrap());
        let l = g.mean_abs_diff(p, vec![0.1, 0.0, 3.5, 0.2]).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[0.25, -0.25, -0.25, 0.25]);
        // Central differences away from the kinks.
        let base = [0.5, -0.2, 3.0, 1.0];
        for k in 0..4 {
            let f = |h: f64| {
                let mut x = base;
                x[k] += h;
                loss_implicit(&x, &[0.1, 0.0, 3.5, 0.2]).unwrap()
            };
            let num = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((num - grads.get(p).unwrap().data()[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn mask_examples() {
        let a = Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(loss_mask(&a, &a).unwrap(), 0.0);
        let b = Tensor::vector(vec![1.0, 5.0, 3.0]).unwrap();
        assert_eq!(loss_mask(&a, &b).unwrap(), 3.0);
        assert!(loss_mask(&a, &Tensor::vector(vec![1.0]).unwrap()).is_err());
    }

    #[test]
    fn source_examples() {
        let logits = Tensor::new(vec![2, 10], vec![0.7; 20]).unwrap();
        let mut y = vec![0.0; 20];
        y[3] = 1.0;
        y[19] = 1.0;
        let y = Tensor::new(vec![2, 10], y).unwrap();
        assert!((loss_cls_source(&logits, &y).unwrap() - 10f64.ln()).abs() < 1e-12);
        let confident = Tensor::from_rows(&[[40.0, -40.0, -40.0]]).unwrap();
        let y0 = Tensor::from_rows(&[[1.0, 0.0, 0.0]]).unwrap();
        assert!(loss_cls_source(&confident, &y0).unwrap() < 1e-30);
        // Relabelling classes consistently leaves the loss unchanged.
        let l = Tensor::from_rows(&[[0.3, -1.0, 2.0], [1.5, 0.2, -0.4]]).unwrap();
        let t = Tensor::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let perm = |m: &Tensor| {
            Tensor::from_rows(
                &(0..2)
                    .map(|r| {
                        let x = m.row(r);
                        [x[2], x[0], x[1]]
                    })
                    .collect::<Vec<_>>(),
            )
            .unwrap()
        };
        let a = loss_cls_source(&l, &t).unwrap();
        let b = loss_cls_source(&perm(&l), &perm(&t)).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn target_examples() {
        let logits = Tensor::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let none = PseudoLabelSet::new(vec![None, None], 2).unwrap();
        assert_eq!(loss_cls_target(&logits, &none, 0.5, 2).unwrap(), 0.0);
        // Probability at the pseudo label exactly e^(−γ): contribution zero.
        let gamma = 2f64.ln();
        let one = PseudoLabelSet::new(vec![None, Some(1)], 2).unwrap();
        assert!(loss_cls_target(&logits, &one, gamma, 2).unwrap().abs() < 1e-15);
        let p0 = 1.0 / (1.0 + (-1.0f64).exp());
        let first = PseudoLabelSet::new(vec![Some(0), None], 2).unwrap();
        let v = loss_cls_target(&logits, &first, 0.1, 4).unwrap();
        assert!((v - (-(p0.ln() + 0.1) / 4.0)).abs() < 1e-15);
    }

    #[test]
    fn target_gradient_only_through_selected_rows() {
        let mut g = Graph::new();
        let l = g.variable(Tensor::from_rows(&[[0.2, 0.9], [1.0, -1.0], [0.0, 0.3]]).unwrap());
        let ce = g
            .class_cross_entropy(l, vec![None, Some(0), None], 3.0)
            .unwrap();
        let grads = g.backward(ce).unwrap();
        let d = grads.get(l).unwrap();
        assert_eq!(d.row(0), &[0.0, 0.0]);
        assert_eq!(d.row(2), &[0.0, 0.0]);
        assert!(d.row(1).iter().all(|&v| v != 0.0));
    }

    #[test]
    fn total_loss_weighting() {
        let c = LossComponents {
            implicit: 0.4,
            mask: 0.01,
            cls_source: 1.5,
            cls_target: -0.2,
        };
        let zero = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            mu: 0.0,
        };
        assert_eq!(total_loss(&c, &zero), 0.4);
        let d = LossWeights::default();
        assert_eq!((d.alpha, d.beta, d.mu), (100.0, 1.0, 1.0));
        assert!((total_loss(&c, &d) - (0.4 + 1.0 + 1.5 - 0.2)).abs() < 1e-15);
        let p = d.pretraining();
        assert_eq!((p.alpha, p.beta, p.mu), (100.0, 0.0, 0.0));
        assert!(LossWeights { alpha: -1.0, ..d }.validate().is_err());
    }
}
