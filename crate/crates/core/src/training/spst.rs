//! Pseudo-label selection for self-paced self-training.
//!
//! For a fixed model the per-sample objective `−(ŷ·log p + γ|ŷ|₁)` over
//! `ŷ ∈ {0, e_1, …, e_J}` is minimized by the argmax one-hot when
//! `log p_max + γ > 0` and by the zero vector otherwise.

use crate::error::{ensure, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SpstConfig {
    /// Selection reward used when `selection_fractions` is empty.
    pub gamma: f64,
    pub rounds: usize,
    pub epochs_per_round: usize,
    /// Per-round share of target samples to select; γ is solved from it.
    /// Rounds past the end reuse the last entry.
    pub selection_fractions: Vec<f64>,
}

impl Default for SpstConfig {
    fn default() -> Self {
        SpstConfig {
            gamma: 0.1,
            rounds: 3,
            epochs_per_round: 10,
            selection_fractions: vec![0.6, 0.7, 0.8],
        }
    }
}

impl SpstConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.gamma > 0.0 && self.gamma.is_finite(),
            "gamma must be positive"
        );
        ensure!(
            self.epochs_per_round >= 1,
            "epochs_per_round must be positive"
        );
        ensure!(
            self.selection_fractions
                .iter()
                .all(|f| *f > 0.0 && *f <= 1.0),
            "selection fractions must lie in (0, 1]"
        );
        Ok(())
    }

    /// The fraction targeted in `round`, if the schedule is fraction-driven.
    pub fn fraction_for_round(&self, round: usize) -> Option<f64> {
        let f = &self.selection_fractions;
        (!f.is_empty()).then(|| f[round.min(f.len() - 1)])
    }
}

/// One entry per target cloud: a class index or unselected.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    labels: Vec<Option<usize>>,
    num_classes: usize,
}

impl PseudoLabelSet {
    pub fn new(labels: Vec<Option<usize>>, num_classes: usize) -> Result<Self> {
        ensure!(
            labels.iter().flatten().all(|&c| c < num_classes),
            "pseudo label out of range for {num_classes} classes"
        );
        Ok(PseudoLabelSet {
            labels,
            num_classes,
        })
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn get(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn selected_count(&self) -> usize {
        self.labels.iter().flatten().count()
    }

    pub fn selected_fraction(&self) -> f64 {
        if self.labels.is_empty() {
            0.0
        } else {
            self.selected_count() as f64 / self.labels.len() as f64
        }
    }
}

fn check_distribution(p: &[f64]) -> Result<()> {
    ensure!(!p.is_empty(), "empty probability vector");
    ensure!(
        p.iter().all(|v| v.is_finite() && *v >= 0.0),
        "probabilities must be finite and non-negative"
    );
    let s: f64 = p.iter().sum();
    ensure!((s - 1.0).abs() <= 1e-9, "probabilities sum to {s}, not 1");
    Ok(())
}

/// Lowest index of the largest entry.
fn argmax(p: &[f64]) -> (usize, f64) {
    let mut best = (0, p[0]);
    for (j, &v) in p.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

/// Selects `argmax p` for every sample with `p_max > e^(−γ)`.
pub fn spst_select(probabilities: &[Vec<f64>], gamma: f64) -> Result<PseudoLabelSet> {
    ensure!(gamma > 0.0, "gamma must be positive");
    let threshold = (-gamma).exp();
    let mut labels = Vec::with_capacity(probabilities.len());
    let mut classes = 0;
    for p in probabilities {
        check_distribution(p)?;
        classes = classes.max(p.len());
        let (j, pmax) = argmax(p);
        labels.push((pmax > threshold).then_some(j));
    }
    PseudoLabelSet::new(labels, classes)
}

/// Inner objective `−(ŷ·log p + γ|ŷ|₁)` for one sample and candidate label.
pub fn selection_objective(p: &[f64], label: Option<usize>, gamma: f64) -> f64 {
    match label {
        None => 0.0,
        Some(j) => -(p[j].ln() + gamma),
    }
}

/// γ such that selecting `p_max > e^(−γ)` keeps `⌈fraction·N⌉` samples, with
/// the threshold halfway between the last kept and first dropped `p_max`.
/// Equal `p_max` values at the cut can make the realized fraction larger.
pub fn gamma_for_fraction(probabilities: &[Vec<f64>], fraction: f64) -> Result<f64> {
    ensure!(!probabilities.is_empty(), "no target probabilities");
    ensure!(
        fraction > 0.0 && fraction <= 1.0,
        "fraction must lie in (0, 1]"
    );
    let mut pmax = Vec::with_capacity(probabilities.len());
    for p in probabilities {
        check_distribution(p)?;
        pmax.push(argmax(p).1);
    }
    pmax.sort_by(|a, b| b.total_cmp(a));
    let k = ((fraction * pmax.len() as f64).ceil() as usize).clamp(1, pmax.len());
    let last_kept = pmax[k - 1];
    let threshold = if k < pmax.len() {
        0.5 * (last_kept + pmax[k])
    } else {
        0.5 * last_kept
    };
    // A threshold of 1 would mean γ = 0, which admits nothing.
    let threshold = threshold.min(1.0 - f64::EPSILON);
    Ok(-threshold.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_simplex(rng: &mut ChaCha8Rng, j: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..j)
            .map(|_| -rng.random_range(1e-12f64..1.0).ln())
            .collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn worked_examples() {
        let s = spst_select(&[vec![0.9, 0.05, 0.05]], 0.2).unwrap();
        assert_eq!(s.labels(), &[Some(0)]);
        let u = spst_select(&[vec![1.0 / 3.0; 3]], 0.1).unwrap();
        assert_eq!(u.labels(), &[None]);
        let tiny = spst_select(&[vec![1.0, 0.0], vec![0.6, 0.4]], 1e-300).unwrap();
        assert_eq!(tiny.selected_count(), 0);
    }

    #[test]
    fn ties_go_to_lower_class() {
        let s = spst_select(&[vec![0.45, 0.45, 0.1]], 5.0).unwrap();
        assert_eq!(s.labels(), &[Some(0)]);
    }

    #[test]
    fn rejects_unnormalized_input() {
        assert!(spst_select(&[vec![0.5, 0.6]], 0.3).is_err());
        assert!(spst_select(&[vec![0.5, 0.5]], 0.0).is_err());
        assert!(PseudoLabelSet::new(vec![Some(3)], 3).is_err());
    }

    #[test]
    fn gamma_for_fraction_hits_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probs: Vec<Vec<f64>> = (0..300).map(|_| random_simplex(&mut rng, 3)).collect();
        let mut last = 0.0;
        for f in [0.6, 0.7, 0.8, 1.0] {
            let g = gamma_for_fraction(&probs, f).unwrap();
            let sel = spst_select(&probs, g).unwrap();
            assert_eq!(sel.selected_count(), (f * 300.0f64).ceil() as usize);
            assert!(sel.selected_fraction() >= last);
            last = sel.selected_fraction();
        }
    }

    #[test]
    fn fraction_schedule() {
        let c = SpstConfig::default();
        assert_eq!(c.fraction_for_round(0), Some(0.6));
        assert_eq!(c.fraction_for_round(2), Some(0.8));
        assert_eq!(c.fraction_for_round(7), Some(0.8));
        let fixed = SpstConfig {
            selection_fractions: vec![],
            ..c
        };
        assert_eq!(fixed.fraction_for_round(0), None);
        assert!(SpstConfig {
            gamma: 0.0,
            ..SpstConfig::default()
        }
        .validate()
        .is_err());
    }

    proptest! {
        #[test]
        fn selection_minimizes_inner_objective(seed in 0u64..1_000_000, j in 2usize..11, gamma in 1e-6f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_simplex(&mut rng, j);
            let chosen = spst_select(std::slice::from_ref(&p), gamma).unwrap().get(0);
            let best = selection_objective(&p, chosen, gamma);
            for alt in std::iter::once(None).chain((0..j).map(Some)) {
                prop_assert!(best <= selection_objective(&p, alt, gamma));
            }
        }

        #[test]
        fn selection_fraction_monotone_in_gamma(seed in 0u64..1_000_000, g1 in 0.01f64..2.0, dg in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let probs: Vec<Vec<f64>> = (0..50).map(|_| random_simplex(&mut rng, 4)).collect();
            let a = spst_select(&probs, g1).unwrap().selected_fraction();
            let b = spst_select(&probs, g1 + dg).unwrap().selected_fraction();
            prop_assert!(b >= a);
        }
    }
}
