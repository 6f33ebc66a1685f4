//! Supervised metrics, episodic statistics, and the ablation variant set.

use crate::error::{Error, Result};
use serde::Serialize;

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn record(&mut self, truth: usize, prediction: usize) {
        assert!(truth < self.n_classes && prediction < self.n_classes);
        self.counts[truth * self.n_classes + prediction] += 1;
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn count(&self, truth: usize, prediction: usize) -> u64 {
        self.counts[truth * self.n_classes + prediction]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.n_classes).map(|c| self.count(c, c)).sum();
        correct as f64 / self.total().max(1) as f64
    }
}

/// Macro-averaged precision, recall, and F1. Classes with a zero
/// denominator contribute zero to the unweighted mean.
pub fn macro_prf1(cm: &ConfusionMatrix) -> (f64, f64, f64) {
    assert!(cm.total() > 0, "empty confusion matrix");
    let n = cm.n_classes();
    let (mut p_sum, mut r_sum, mut f_sum) = (0.0, 0.0, 0.0);
    for c in 0..n {
        let tp = cm.count(c, c) as f64;
        let fp: f64 = (0..n).filter(|&t| t != c).map(|t| cm.count(t, c) as f64).sum();
        let fn_: f64 = (0..n).filter(|&p| p != c).map(|p| cm.count(c, p) as f64).sum();
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        p_sum += precision;
        r_sum += recall;
        f_sum += f1;
    }
    let inv = 1.0 / n as f64;
    (p_sum * inv, r_sum * inv, f_sum * inv)
}

/// Per-episode accuracies with their normal-approximation interval.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct EpisodeStats {
    pub per_episode_acc: Vec<f64>,
    pub mean: f64,
    pub ci95: f64,
}

/// `1.96 * sigma_hat / sqrt(episodes)`.
pub fn ci95(sigma_hat: f64, episodes: usize) -> f64 {
    1.96 * sigma_hat / (episodes as f64).sqrt()
}

/// Mean and 95% interval over episode accuracies, with Bessel-corrected
/// standard deviation.
pub fn episode_ci(accs: &[f64]) -> Result<EpisodeStats> {
    let e = accs.len();
    if e < 2 {
        return Err(Error::Protocol(format!(
            "confidence interval undefined for {} episode(s)",
            e
        )));
    }
    let mean = accs.iter().sum::<f64>() / e as f64;
    let var = accs.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / (e as f64 - 1.0);
    Ok(EpisodeStats {
        per_episode_acc: accs.to_vec(),
        mean,
        ci95: ci95(var.sqrt(), e),
    })
}

/// The seven single-factor variants: the full model, three loss removals,
/// and three fusion/structure changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoKl,
    NoRecon,
    NoKlRecon,
    UniformWeights,
    FineOnly,
    CoarseOnly,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 7] = [
        AblationVariant::Full,
        AblationVariant::NoKl,
        AblationVariant::NoRecon,
        AblationVariant::NoKlRecon,
        AblationVariant::UniformWeights,
        AblationVariant::FineOnly,
        AblationVariant::CoarseOnly,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoKl => "no_kl",
            AblationVariant::NoRecon => "no_recon",
            AblationVariant::NoKlRecon => "no_kl_recon",
            AblationVariant::UniformWeights => "uniform_weights",
            AblationVariant::FineOnly => "fine_only",
            AblationVariant::CoarseOnly => "coarse_only",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.tag() == tag)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown ablation variant {:?}; expected one of {}",
                    tag,
                    Self::ALL.map(|v| v.tag()).join(", ")
                ))
            })
    }

    /// Whether the KL term enters the training objective.
    pub fn include_kl(self) -> bool {
        !matches!(self, AblationVariant::NoKl | AblationVariant::NoKlRecon)
    }

    /// Whether the reconstruction term enters the training objective.
    pub fn include_recon(self) -> bool {
        !matches!(self, AblationVariant::NoRecon | AblationVariant::NoKlRecon)
    }

    /// Whether the gate is bypassed with uniform `1/K` weights.
    pub fn force_uniform_weights(self) -> bool {
        matches!(self, AblationVariant::UniformWeights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_is_perfect() {
        let mut cm = ConfusionMatrix::new(3);
        for c in 0..3 {
            for _ in 0..5 {
                cm.record(c, c);
            }
        }
        let (p, r, f1) = macro_prf1(&cm);
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0));
        assert_eq!(cm.accuracy(), 1.0);
        // macro recall equals accuracy on a diagonal matrix
        assert_eq!(r, cm.accuracy());
    }

    #[test]
    fn hand_matrix_macro_f1() {
        // truth 0: predicted [2, 0]; truth 1: predicted [1, 1]
        let mut cm = ConfusionMatrix::new(2);
        cm.record(0, 0);
        cm.record(0, 0);
        cm.record(1, 0);
        cm.record(1, 1);
        // independent per-class computation
        let p0 = 2.0 / 3.0;
        let r0 = 1.0;
        let f0 = 2.0 * p0 * r0 / (p0 + r0);
        let p1 = 1.0;
        let r1 = 0.5;
        let f1c = 2.0 * p1 * r1 / (p1 + r1);
        let expected = (f0 + f1c) / 2.0;
        let (_, _, f1) = macro_prf1(&cm);
        assert!((f1 - expected).abs() < 1e-12);
        assert!((f1 - 0.73333).abs() < 1e-5);
    }

    #[test]
    fn absent_class_contributes_zero() {
        let mut cm = ConfusionMatrix::new(3);
        cm.record(0, 0);
        cm.record(1, 1);
        // class 2 never true, never predicted
        let (p, r, _) = macro_prf1(&cm);
        assert!((p - 2.0 / 3.0).abs() < 1e-12);
        assert!((r - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_matches_streaming_counter() {
        let mut cm = ConfusionMatrix::new(4);
        let mut correct = 0u64;
        let mut total = 0u64;
        for i in 0..97usize {
            let truth = i % 4;
            let pred = (i * 7 + 1) % 4;
            cm.record(truth, pred);
            total += 1;
            if truth == pred {
                correct += 1;
            }
        }
        assert_eq!(cm.accuracy(), correct as f64 / total as f64);
        assert_eq!(cm.total(), total);
    }

    #[test]
    fn equal_accuracies_have_zero_interval() {
        let stats = episode_ci(&[0.8; 10]).unwrap();
        assert!((stats.mean - 0.8).abs() < 1e-12);
        assert!(stats.ci95 < 1e-12);
    }

    #[test]
    fn ci_formula_reference_value() {
        assert!((ci95(0.1, 100) - 0.0196).abs() < 1e-12);
    }

    #[test]
    fn half_and_half_hand_statistics() {
        let mut accs = vec![0.0; 50];
        accs.extend(vec![1.0; 50]);
        let stats = episode_ci(&accs).unwrap();
        assert!((stats.mean - 0.5).abs() < 1e-12);
        let sigma = (accs.iter().map(|&a| (a - 0.5f64).powi(2)).sum::<f64>() / 99.0).sqrt();
        assert!((sigma - 0.50252).abs() < 1e-5);
        assert!((stats.ci95 - 0.0985).abs() < 1e-4);
    }

    #[test]
    fn single_episode_has_no_interval() {
        assert!(episode_ci(&[0.5]).is_err());
    }

    #[test]
    fn variant_tags_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(AblationVariant::parse(v.tag()).unwrap(), v);
        }
        assert!(AblationVariant::parse("nope").is_err());
    }

    #[test]
    fn variant_loss_switches() {
        assert!(AblationVariant::Full.include_kl());
        assert!(AblationVariant::Full.include_recon());
        assert!(!AblationVariant::NoKl.include_kl());
        assert!(AblationVariant::NoKl.include_recon());
        assert!(AblationVariant::NoRecon.include_kl());
        assert!(!AblationVariant::NoRecon.include_recon());
        assert!(!AblationVariant::NoKlRecon.include_kl());
        assert!(!AblationVariant::NoKlRecon.include_recon());
        assert!(AblationVariant::UniformWeights.force_uniform_weights());
    }
}
