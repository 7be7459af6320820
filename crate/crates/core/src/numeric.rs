//! Minimal dense numeric kernel: tempered softmax, cross-entropy, KL
//! divergence, SGD update, and a central-difference gradient oracle.
//!
//! All arithmetic is 64-bit. Public operations validate that inputs and
//! outputs stay finite.

use crate::{Error, Result};

/// Teacher probabilities below this floor are clamped before taking logs in
/// [`kl_div`]. Keeps degenerate (near one-hot) teachers from producing
/// infinities.
pub const TEACHER_FLOOR: f64 = 1e-12;

/// Tolerance on `sum(probs) == 1` for a valid [`ProbDist`].
pub const PROB_SUM_TOL: f64 = 1e-9;

pub fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what}: non-finite entry {} at index {pos}",
            values[pos]
        )));
    }
    Ok(())
}

/// A discrete probability distribution over class indices.
///
/// Invariants: every entry in (0, 1], entries sum to 1 within [`PROB_SUM_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    probs: Vec<f64>,
}

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid_argument("probability vector is empty"));
        }
        check_finite(&probs, "probabilities")?;
        if let Some(pos) = probs.iter().position(|&p| p <= 0.0 || p > 1.0) {
            return Err(Error::InvalidArgument(format!(
                "probability {} at index {pos} outside (0, 1]",
                probs[pos]
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(ProbDist { probs })
    }

    /// Uniform distribution over `n` classes.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid_argument("zero classes"));
        }
        ProbDist::new(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }
}

/// Softmax with temperature: `probs[i] = exp(logits[i]/T) / Σ_j exp(logits[j]/T)`.
///
/// Computed with max-subtraction for stability. Entries that underflow to
/// zero are lifted to the smallest positive normal before normalization so
/// the output always satisfies the [`ProbDist`] invariants.
pub fn softmax_temp(logits: &[f64], temperature: f64) -> Result<ProbDist> {
    if logits.is_empty() {
        return Err(Error::invalid_argument("softmax of empty logits"));
    }
    check_finite(logits, "logits")?;
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - max) / temperature).exp().max(f64::MIN_POSITIVE))
        .collect();
    let sum: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= sum;
    }
    ProbDist::new(exps)
}

/// Cross-entropy against a hard label: `-log(pred[label])`.
pub fn cross_entropy(pred: &ProbDist, label: usize) -> Result<f64> {
    if label >= pred.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            pred.len()
        )));
    }
    Ok(-pred.as_slice()[label].ln())
}

/// Cross-entropy against a soft target: `-Σ_i target[i]·log(pred[i])`.
pub fn cross_entropy_soft(pred: &ProbDist, target: &ProbDist) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: pred {} vs target {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(-pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| t * p.ln())
        .sum::<f64>())
}

/// KL divergence `Σ_i student[i]·log(student[i]/teacher[i])`.
///
/// Teacher entries below [`TEACHER_FLOOR`] are clamped to the floor before
/// the log. The result is clamped at zero: for valid distributions the exact
/// value is non-negative and only floating-point rounding can dip below.
pub fn kl_div(student: &ProbDist, teacher: &ProbDist) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: student {} vs teacher {}",
            student.len(),
            teacher.len()
        )));
    }
    let kl: f64 = student
        .as_slice()
        .iter()
        .zip(teacher.as_slice())
        .map(|(&s, &t)| s * (s / t.max(TEACHER_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// One plain SGD update: `out[i] = params[i] - lr·grads[i]`.
pub fn sgd_step(params: &[f64], grads: &[f64], lr: f64) -> Result<Vec<f64>> {
    if params.len() != grads.len() {
        return Err(Error::InvalidArgument(format!(
            "length mismatch: params {} vs grads {}",
            params.len(),
            grads.len()
        )));
    }
    if lr <= 0.0 || !lr.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive and finite, got {lr}"
        )));
    }
    check_finite(grads, "gradients")?;
    Ok(params
        .iter()
        .zip(grads)
        .map(|(&p, &g)| p - lr * g)
        .collect())
}

/// Central-difference gradient: `(f(x+εe_i) - f(x-εe_i)) / 2ε` per coordinate.
///
/// Test oracle for analytic backpropagation; the caller is responsible for
/// `f` being finite in an `eps` neighborhood of `point`.
pub fn finite_diff_grad<F: Fn(&[f64]) -> f64>(loss_fn: F, point: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let plus = loss_fn(&probe);
        probe[i] = orig - eps;
        let minus = loss_fn(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    grad
}
