//! Per-target class beliefs fused by conflation.
//!
//! Conflation multiplies distributions elementwise and renormalizes. It is
//! commutative and associative, needs no measurement likelihood model, and a
//! uniform measurement leaves the belief unchanged, which makes it a good fit
//! for fusing the output of a black-box classifier.

use serde::{Deserialize, Serialize};

use crate::sensor::ClassProbability;

/// Probability vector over classes held for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub probs: Vec<f64>,
}

impl Belief {
    pub fn uniform(num_classes: usize) -> Self {
        assert!(num_classes >= 2, "need at least two classes");
        Self {
            probs: vec![1.0 / num_classes as f64; num_classes],
        }
    }

    pub fn max_prob(&self) -> f64 {
        self.probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Latching classification flag with its threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationStatus {
    pub classified: bool,
    pub b_max: f64,
}

impl ClassificationStatus {
    pub fn new(b_max: f64) -> Self {
        Self {
            classified: false,
            b_max,
        }
    }
}

/// Fuse a belief with a measurement: `result_c = b_c p_c / sum_k b_k p_k`.
///
/// A measurement with support orthogonal to the belief (zero denominator)
/// cannot be fused; the belief is returned unchanged and the event is logged.
pub fn conflate(b: &Belief, p: &ClassProbability) -> Belief {
    conflate_weighted(b, p, 1.0)
}

/// Weighted conflation: `result_c` proportional to `b_c * p_c^w`.
///
/// `w = 1` is plain conflation, `w = 0` ignores the measurement. Useful when
/// the classifier also reports a confidence for its output distribution.
pub fn conflate_weighted(b: &Belief, p: &ClassProbability, w: f64) -> Belief {
    assert_eq!(b.probs.len(), p.probs.len(), "class count mismatch");
    assert!(w >= 0.0, "conflation weight must be non-negative");
    let mut fused: Vec<f64> = b
        .probs
        .iter()
        .zip(&p.probs)
        .map(|(&bc, &pc)| bc * pc.powf(w))
        .collect();
    let total: f64 = fused.iter().sum();
    if total <= 0.0 {
        log::warn!("conflation skipped: measurement support orthogonal to belief");
        return b.clone();
    }
    for v in &mut fused {
        *v /= total;
    }
    Belief { probs: fused }
}

/// Shannon entropy of `dist` normalized by ln(C) so the result lies in [0, 1].
/// Uses the convention 0 ln 0 = 0.
pub fn normalized_entropy(dist: &[f64]) -> f64 {
    let c = dist.len();
    debug_assert!(c >= 2);
    entropy_nats(dist) / (c as f64).ln()
}

/// Shannon entropy in nats with 0 ln 0 = 0.
pub fn entropy_nats(dist: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in dist {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// Latch the classified flag once the belief maximum reaches the threshold.
pub fn update_status(b: &Belief, status: ClassificationStatus) -> ClassificationStatus {
    ClassificationStatus {
        classified: status.classified || b.max_prob() >= status.b_max,
        b_max: status.b_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meas(probs: Vec<f64>) -> ClassProbability {
        ClassProbability::new(probs)
    }

    #[test]
    fn uniform_prior_is_identity() {
        let b = Belief::uniform(2);
        let out = conflate(&b, &meas(vec![0.9, 0.1]));
        assert!((out.probs[0] - 0.9).abs() < 1e-12);
        assert!((out.probs[1] - 0.1).abs() < 1e-12);
    }

    #[test]
    fn uniform_measurement_is_identity() {
        let b = Belief {
            probs: vec![0.3, 0.7],
        };
        let out = conflate(&b, &meas(vec![0.5, 0.5]));
        assert!((out.probs[0] - 0.3).abs() < 1e-12);
        assert!((out.probs[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn conflate_direct_evaluation() {
        let b = Belief {
            probs: vec![0.6, 0.4],
        };
        let out = conflate(&b, &meas(vec![0.9, 0.1]));
        // (0.54, 0.04) / 0.58
        assert!((out.probs[0] - 0.54 / 0.58).abs() < 1e-12);
        assert!((out.probs[1] - 0.04 / 0.58).abs() < 1e-12);
        assert!((out.probs[0] - 0.93103).abs() < 1e-5);
    }

    #[test]
    fn weighted_matches_plain_at_one() {
        let b = Belief {
            probs: vec![0.6, 0.4],
        };
        let p = meas(vec![0.9, 0.1]);
        let plain = conflate(&b, &p);
        let weighted = conflate_weighted(&b, &p, 1.0);
        for (a, b) in plain.probs.iter().zip(&weighted.probs) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_zero_keeps_belief() {
        let b = Belief {
            probs: vec![0.6, 0.4],
        };
        let out = conflate_weighted(&b, &meas(vec![0.9, 0.1]), 0.0);
        assert!((out.probs[0] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn weighted_square_direct_evaluation() {
        let b = Belief {
            probs: vec![0.5, 0.5],
        };
        let out = conflate_weighted(&b, &meas(vec![0.9, 0.1]), 2.0);
        assert!((out.probs[0] - 0.81 / 0.82).abs() < 1e-12);
        assert!((out.probs[1] - 0.01 / 0.82).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_support_is_skipped() {
        let b = Belief {
            probs: vec![1.0, 0.0],
        };
        let out = conflate(&b, &meas(vec![0.0, 1.0]));
        assert_eq!(out, b);
    }

    #[test]
    fn entropy_extremes() {
        assert!((normalized_entropy(&[0.25; 4]) - 1.0).abs() < 1e-12);
        assert!(normalized_entropy(&[1.0, 0.0]).abs() < 1e-12);
    }

    #[test]
    fn entropy_direct_evaluation() {
        let h = normalized_entropy(&[0.95, 0.05]);
        assert!((h - 0.28640).abs() < 1e-5);
    }

    #[test]
    fn status_latches() {
        let status = ClassificationStatus::new(0.95);
        let above = update_status(
            &Belief {
                probs: vec![0.96, 0.04],
            },
            status,
        );
        assert!(above.classified);
        let below = update_status(
            &Belief {
                probs: vec![0.94, 0.06],
            },
            status,
        );
        assert!(!below.classified);
        let still = update_status(
            &Belief {
                probs: vec![0.5, 0.5],
            },
            above,
        );
        assert!(still.classified);
    }

    /// Odds after n fusions of p = (0.8, 0.2) against a uniform prior are
    /// 4^n : 1, so the 0.95 threshold is reached at exactly n = 3.
    #[test]
    fn convergence_oracle_three_fusions() {
        let p = meas(vec![0.8, 0.2]);
        let mut b = Belief::uniform(2);
        let mut fusions = 0;
        while b.max_prob() < 0.95 {
            b = conflate(&b, &p);
            fusions += 1;
            assert!(fusions <= 10);
            let odds = 4f64.powi(fusions);
            assert!((b.probs[0] - odds / (odds + 1.0)).abs() < 1e-12);
        }
        assert_eq!(fusions, 3);
        assert!((b.probs[0] - 64.0 / 65.0).abs() < 1e-12);
    }

    fn prob_vec(c: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.01..1.0f64, c).prop_map(|raw| {
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        })
    }

    proptest! {
        #[test]
        fn conflation_commutes(p1 in prob_vec(3), p2 in prob_vec(3)) {
            let u = Belief::uniform(3);
            let a = conflate(&conflate(&u, &meas(p1.clone())), &meas(p2.clone()));
            let b = conflate(&conflate(&u, &meas(p2)), &meas(p1));
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn conflation_associates(p1 in prob_vec(4), p2 in prob_vec(4), p3 in prob_vec(4)) {
            let u = Belief::uniform(4);
            // ((p1, p2), p3) versus (p1, (p2 then p3 pre-fused via a fresh prior))
            let left = conflate(&conflate(&conflate(&u, &meas(p1.clone())), &meas(p2.clone())), &meas(p3.clone()));
            let fused23 = conflate(&conflate(&u, &meas(p2)), &meas(p3));
            let right = conflate(&conflate(&u, &meas(p1)), &meas(fused23.probs));
            for (x, y) in left.probs.iter().zip(&right.probs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn conflation_output_is_distribution(p1 in prob_vec(5), p2 in prob_vec(5)) {
            let out = conflate(&Belief { probs: p1 }, &meas(p2));
            let sum: f64 = out.probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(out.probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
