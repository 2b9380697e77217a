//! Probability-vector primitives: softmax, log-softmax, KL and Jensen-Shannon
//! divergence.
//!
//! Divergences are measured in bits (log base 2), so the Jensen-Shannon
//! divergence of any two distributions lies in `[0, 1]`.

use std::ops::Deref;

use thiserror::Error;

/// Probabilities below this floor are treated as exact zeros in divergence sums.
pub const PROB_FLOOR: f64 = 1e-300;

/// Tolerance on `Σ p = 1` accepted by [`Probs::new`].
pub const NORMALIZATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate distribution: every entry is masked")]
    Degenerate,
}

pub type Result<T> = std::result::Result<T, DistError>;

/// Raw next-token scores over a vocabulary.
///
/// Entries are finite except those masked to negative infinity by the
/// plausibility constraint.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(scores: Vec<f64>) -> Self {
        Self(scores)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    /// Index of the largest score; ties go to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.0)
    }

    /// Number of entries masked to negative infinity.
    pub fn masked_count(&self) -> usize {
        self.0.iter().filter(|x| **x == f64::NEG_INFINITY).count()
    }
}

impl Deref for Logits {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Logits {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// A normalized probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Probs(Vec<f64>);

impl Probs {
    /// Validates that every entry lies in `[0, 1]` and the total is one
    /// within [`NORMALIZATION_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(DistError::InvalidInput("empty probability vector".into()));
        }
        if let Some(bad) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(DistError::InvalidInput(format!("probability {bad} outside [0, 1]")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(DistError::InvalidInput(format!("probabilities sum to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.0)
    }

    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(0.0, f64::max)
    }
}

impl Deref for Probs {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn argmax(xs: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            Some((_, b)) if x <= b => {}
            _ if x.is_nan() => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

fn check_logits(logits: &[f64], temperature: f64) -> Result<f64> {
    if logits.is_empty() {
        return Err(DistError::InvalidInput("empty logit vector".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(DistError::InvalidInput(format!("temperature must be positive, got {temperature}")));
    }
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(DistError::InvalidInput("logits contain NaN or +inf".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(DistError::Degenerate);
    }
    Ok(max)
}

/// Temperature-scaled softmax with max-shift. Entries at negative infinity
/// map to probability zero.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Probs> {
    let max = check_logits(logits, temperature)?;
    let mut out: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(Probs(out))
}

/// Natural-log softmax. Masked entries stay at negative infinity.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let max = check_logits(logits, temperature)?;
    let scaled: Vec<f64> = logits.iter().map(|&l| (l - max) / temperature).collect();
    let log_total = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    Ok(scaled.into_iter().map(|s| s - log_total).collect())
}

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return Err(DistError::InvalidInput(format!("length mismatch: {} vs {}", p.len(), q.len())));
    }
    Ok(())
}

/// `Σ p_i · log2(p_i / q_i)` over the support of `p`. Returns `+∞` when `p`
/// puts mass where `q` has none.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi <= PROB_FLOOR {
            continue;
        }
        if qi <= PROB_FLOOR {
            return Ok(f64::INFINITY);
        }
        total += pi * (pi / qi).log2();
    }
    Ok(total.max(0.0))
}

/// Jensen-Shannon divergence in bits.
///
/// Each index contributes `½(p·log2(p/m) + q·log2(q/m))`; both operands of
/// the inner sum are formed the same way, so swapping `p` and `q` yields a
/// bit-identical result.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        let mi = 0.5 * (pi + qi);
        if mi <= PROB_FLOOR {
            continue;
        }
        total += 0.5 * (half_term(pi, mi) + half_term(qi, mi));
    }
    Ok(total.clamp(0.0, 1.0))
}

fn half_term(x: f64, m: f64) -> f64 {
    if x <= PROB_FLOOR {
        0.0
    } else {
        x * (x / m).log2()
    }
}
