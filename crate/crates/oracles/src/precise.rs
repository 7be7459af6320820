//! High-precision reference evaluation of tempered softmax, cross-entropy,
//! and KL divergence via double-double arithmetic. Inputs and outputs are
//! plain f64 so production values can be checked against these at far below
//! f64 rounding error.

use crate::dd::Dd;

/// Teacher floor mirrored from the production KL contract, applied here in
/// extended precision so both paths evaluate the same clamped formula.
const TEACHER_FLOOR: f64 = 1e-12;

/// Tempered softmax with max subtraction, evaluated in double-double.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    softmax_dd(logits, temperature)
        .into_iter()
        .map(Dd::to_f64)
        .collect()
}

pub(crate) fn softmax_dd(logits: &[f64], temperature: f64) -> Vec<Dd> {
    assert!(!logits.is_empty() && temperature > 0.0);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let t = Dd::from_f64(temperature);
    let exps: Vec<Dd> = logits
        .iter()
        .map(|&l| ((Dd::from_f64(l) - Dd::from_f64(max)) / t).exp())
        .collect();
    let sum = exps.iter().fold(Dd::ZERO, |acc, &e| acc + e);
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log(probs[label])` in double-double.
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    (-Dd::from_f64(probs[label]).ln()).to_f64()
}

/// Cross-entropy of softmaxed logits against a hard label, all in
/// double-double (no f64 rounding of the intermediate distribution).
pub fn cross_entropy_of_logits(logits: &[f64], temperature: f64, label: usize) -> f64 {
    (-softmax_dd(logits, temperature)[label].ln()).to_f64()
}

/// `Σ p_i · log(p_i / max(q_i, floor))` in double-double, with the same
/// teacher floor as the production kernel.
pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut total = Dd::ZERO;
    for (&pi, &qi) in p.iter().zip(q) {
        let ratio = Dd::from_f64(pi) / Dd::from_f64(qi.max(TEACHER_FLOOR));
        total = total + Dd::from_f64(pi) * ratio.ln();
    }
    total.to_f64()
}
