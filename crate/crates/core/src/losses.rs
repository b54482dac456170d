//! Training objectives for AU detection, face alignment, and attention refinement.
//!
//! All functions here operate on a single sample; the graph ops in [`crate::graph`] average them
//! over a batch.

use crate::error::{Error, Result};

/// Probabilities are clamped into `[LOG_EPS, 1 - LOG_EPS]` before taking logarithms.
pub const LOG_EPS: f64 = 1e-12;

fn clamp_prob(p: f64) -> f64 {
    p.clamp(LOG_EPS, 1.0 - LOG_EPS)
}

/// Per-AU weights `w_i = (1/r_i) n / sum_j (1/r_j)` from training-set occurrence rates.
///
/// The weights always sum to `n`, so their mean is one.
#[derive(Debug, Clone, PartialEq)]
pub struct AuWeights(Vec<f64>);

impl AuWeights {
    pub fn from_rates(rates: &[f64]) -> Result<Self> {
        if rates.is_empty() {
            return Err(Error::Config("no occurrence rates supplied".into()));
        }
        for (i, &r) in rates.iter().enumerate() {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(format!(
                    "occurrence rate of AU #{i} is {r}; floor zero rates at 1/(number of training frames)"
                )));
            }
        }
        let n = rates.len() as f64;
        let inv_sum: f64 = rates.iter().map(|r| 1.0 / r).sum();
        Ok(AuWeights(
            rates.iter().map(|r| (1.0 / r) * n / inv_sum).collect(),
        ))
    }

    /// Wraps already-computed weights.
    pub fn from_rates_unchecked(weights: Vec<f64>) -> Self {
        AuWeights(weights)
    }

    pub fn uniform(n: usize) -> Self {
        AuWeights(vec![1.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Floors zero occurrence rates at `1 / frames`, logging a warning for each one.
pub fn floor_rates(rates: &[f64], frames: usize) -> Vec<f64> {
    let floor = 1.0 / frames.max(1) as f64;
    rates
        .iter()
        .enumerate()
        .map(|(i, &r)| {
            if r <= 0.0 {
                log::warn!(
                    "AU #{i} never occurs in the training set; flooring its rate at {floor}"
                );
                floor
            } else {
                r
            }
        })
        .collect()
}

/// `-(1/n) sum_i w_i [p_i log q_i + (1 - p_i) log(1 - q_i)]` for labels `p` and predictions `q`.
pub fn softmax_loss(labels: &[f64], preds: &[f64], weights: &[f64]) -> f64 {
    let n = labels.len() as f64;
    -labels
        .iter()
        .zip(preds)
        .zip(weights)
        .map(|((&p, &q), &w)| {
            let q = clamp_prob(q);
            w * (p * q.ln() + (1.0 - p) * (1.0 - q).ln())
        })
        .sum::<f64>()
        / n
}

pub fn softmax_loss_grad(labels: &[f64], preds: &[f64], weights: &[f64]) -> Vec<f64> {
    let n = labels.len() as f64;
    labels
        .iter()
        .zip(preds)
        .zip(weights)
        .map(|((&p, &q), &w)| {
            if !(LOG_EPS..=1.0 - LOG_EPS).contains(&q) {
                return 0.0;
            }
            -w * (p / q - (1.0 - p) / (1.0 - q)) / n
        })
        .collect()
}

/// `(1/n) sum_i w_i (1 - (2 p_i q_i + eps) / (p_i^2 + q_i^2 + eps))`.
pub fn dice_loss(labels: &[f64], preds: &[f64], weights: &[f64], eps: f64) -> f64 {
    let n = labels.len() as f64;
    labels
        .iter()
        .zip(preds)
        .zip(weights)
        .map(|((&p, &q), &w)| w * (1.0 - (2.0 * p * q + eps) / (p * p + q * q + eps)))
        .sum::<f64>()
        / n
}

pub fn dice_loss_grad(labels: &[f64], preds: &[f64], weights: &[f64], eps: f64) -> Vec<f64> {
    let n = labels.len() as f64;
    labels
        .iter()
        .zip(preds)
        .zip(weights)
        .map(|((&p, &q), &w)| {
            let num = 2.0 * p * q + eps;
            let den = p * p + q * q + eps;
            // d/dq of -(num/den)
            -w * (2.0 * p * den - num * 2.0 * q) / (den * den) / n
        })
        .collect()
}

/// Detection loss: cross entropy plus Dice.
pub fn au_loss(labels: &[f64], preds: &[f64], weights: &[f64], eps: f64) -> f64 {
    softmax_loss(labels, preds, weights) + dice_loss(labels, preds, weights, eps)
}

/// `(1 / (2 d_o^2)) sum_j [(x_j - x'_j)^2 + (y_j - y'_j)^2]` over interleaved `x, y` coordinates.
pub fn align_loss(truth: &[f64], pred: &[f64], inter_ocular: f64) -> Result<f64> {
    if !(inter_ocular > 0.0) {
        return Err(Error::Data(format!(
            "inter-ocular distance must be positive, got {inter_ocular}"
        )));
    }
    let sq: f64 = truth.iter().zip(pred).map(|(t, p)| (t - p) * (t - p)).sum();
    Ok(sq / (2.0 * inter_ocular * inter_ocular))
}

pub fn align_loss_grad(truth: &[f64], pred: &[f64], inter_ocular: f64) -> Vec<f64> {
    let k = 1.0 / (inter_ocular * inter_ocular);
    truth.iter().zip(pred).map(|(t, p)| (p - t) * k).collect()
}

/// Refinement constraint `-sum_k [v_k log r_k + (1 - v_k) log(1 - r_k)]` between initial weights
/// `v` and refined weights `r`.
pub fn attention_consistency_loss(initial: &[f64], refined: &[f64]) -> f64 {
    -initial
        .iter()
        .zip(refined)
        .map(|(&v, &r)| {
            let r = clamp_prob(r);
            v * r.ln() + (1.0 - v) * (1.0 - r).ln()
        })
        .sum::<f64>()
}

pub fn attention_consistency_grad(initial: &[f64], refined: &[f64]) -> Vec<f64> {
    initial
        .iter()
        .zip(refined)
        .map(|(&v, &r)| {
            if !(LOG_EPS..=1.0 - LOG_EPS).contains(&r) {
                return 0.0;
            }
            -(v / r - (1.0 - v) / (1.0 - r))
        })
        .collect()
}

/// Loss weights of the joint objective `E = E_au + lambda1 E_align + lambda2 E_r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub align: f64,
    pub refine: f64,
}

pub fn total_loss(au: f64, align: f64, refine: f64, weights: LossWeights) -> Result<f64> {
    if weights.align < 0.0 || weights.refine < 0.0 {
        return Err(Error::Config(
            "loss trade-off weights must be non-negative".into(),
        ));
    }
    Ok(au + weights.align * align + weights.refine * refine)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOL: f64 = 1e-6;

    #[test]
    fn weights_from_hand_evaluated_rates() {
        // 1/r = (5, 1.25), sum 6.25 -> w = (5*2/6.25, 1.25*2/6.25)
        let w = AuWeights::from_rates(&[0.2, 0.8]).unwrap();
        assert!((w.as_slice()[0] - 1.6).abs() < TOL);
        assert!((w.as_slice()[1] - 0.4).abs() < TOL);
    }

    #[test]
    fn equal_rates_give_unit_weights() {
        let w = AuWeights::from_rates(&[0.3; 5]).unwrap();
        assert!(w.as_slice().iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn zero_rate_is_rejected_and_floor_fixes_it() {
        let err = AuWeights::from_rates(&[0.5, 0.0]).unwrap_err();
        assert!(err.to_string().contains("floor"));
        let floored = floor_rates(&[0.5, 0.0], 64);
        assert_eq!(floored[1], 1.0 / 64.0);
        assert!(AuWeights::from_rates(&floored).is_ok());
    }

    #[test]
    fn softmax_values() {
        assert!(softmax_loss(&[1.0, 0.0], &[1.0, 0.0], &[1.0, 1.0]).abs() < 1e-9);
        let v = softmax_loss(&[1.0], &[0.5], &[1.0]);
        assert!((v - std::f64::consts::LN_2).abs() < TOL);
        let one = softmax_loss(&[1.0, 1.0], &[0.3, 1.0], &[1.0, 1.0]);
        let two = softmax_loss(&[1.0, 1.0], &[0.3, 1.0], &[2.0, 1.0]);
        assert!((two - 2.0 * one).abs() < 1e-9);
    }

    #[test]
    fn dice_values() {
        assert!(dice_loss(&[1.0], &[1.0], &[1.0], 1.0).abs() < TOL);
        assert!((dice_loss(&[1.0], &[0.0], &[1.0], 1.0) - 0.5).abs() < TOL);
        assert!(dice_loss(&[0.0], &[0.0], &[1.0], 1.0).abs() < TOL);
    }

    #[test]
    fn au_loss_is_sum_of_parts() {
        let v = au_loss(&[1.0], &[0.0 + 1e-300], &[1.0], 1.0);
        assert!(v > 0.5);
        let v = au_loss(&[1.0], &[0.5], &[1.0], 1.0);
        let dice = 1.0 - 2.0 / 2.25;
        assert!((v - (std::f64::consts::LN_2 + dice)).abs() < TOL);
    }

    #[test]
    fn align_values() {
        assert_eq!(align_loss(&[1.0, 2.0], &[1.0, 2.0], 3.0).unwrap(), 0.0);
        let v = align_loss(&[0.0, 0.0], &[3.0, 4.0], 5.0).unwrap();
        assert!((v - 0.5).abs() < TOL);
        assert!(align_loss(&[0.0, 0.0], &[3.0, 4.0], 0.0).is_err());
    }

    #[test]
    fn consistency_value() {
        let v = attention_consistency_loss(&[0.5; 4], &[0.5; 4]);
        assert!((v - 4.0 * std::f64::consts::LN_2).abs() < 1e-4);
        assert!(attention_consistency_loss(&[0.0], &[0.0]) < 1e-9);
    }

    #[test]
    fn consistency_minimized_at_initial_value() {
        for &v in &[0.1, 0.37, 0.5, 0.83] {
            let best = (1..1000)
                .map(|i| i as f64 / 1000.0)
                .min_by(|a, b| {
                    attention_consistency_loss(&[v], &[*a])
                        .partial_cmp(&attention_consistency_loss(&[v], &[*b]))
                        .unwrap()
                })
                .unwrap();
            assert!((best - v).abs() <= 1e-3, "v={v} best={best}");
        }
    }

    #[test]
    fn total_loss_weights() {
        let lw = LossWeights {
            align: 0.0,
            refine: 0.0,
        };
        assert_eq!(total_loss(0.7, 3.0, 9.0, lw).unwrap(), 0.7);
        let lw = LossWeights {
            align: 0.5,
            refine: 1e-7,
        };
        let v = total_loss(0.7, 3.0, 9.0, lw).unwrap();
        assert!((v - (0.7 + 1.5 + 9e-7)).abs() < 1e-12);
        assert!(total_loss(
            0.0,
            0.0,
            0.0,
            LossWeights {
                align: -1.0,
                refine: 0.0
            }
        )
        .is_err());
    }
}
