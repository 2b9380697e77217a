//! Per-step four-stream fusion.
//!
//! One decode step sees next-token logits for the original image, two
//! complementary segment images and a blank placeholder. The segment whose
//! distribution diverges most from the blank one is selected, each image
//! stream is contrasted against the blank stream, and the two contrasted
//! vectors are mixed with weight `δ = |Div_a − Div_b|`. A plausibility mask
//! built from the original-image distribution is applied afterwards.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dist::{self, DistError, Logits, Probs};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FusionError {
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error("invalid config: {0}")]
    Config(String),
}

/// Opaque handle naming one conditioning image. Providers resolve it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ImageRef(String);

impl ImageRef {
    pub fn new(s: impl Into<String>) -> Self {
        Self(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ImageRef {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// The four conditioning inputs used at every fused step.
///
/// `segment_a` holds the largest masks, `segment_b` the rest of the image.
/// The engine never inspects pixels; `complementary` only records what the
/// producer of the quad declared.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageQuad {
    pub original: ImageRef,
    pub segment_a: ImageRef,
    pub segment_b: ImageRef,
    pub blank: ImageRef,
    #[serde(default = "default_true")]
    pub complementary: bool,
}

fn default_true() -> bool {
    true
}

impl ImageQuad {
    pub fn new(original: ImageRef, segment_a: ImageRef, segment_b: ImageRef, blank: ImageRef) -> Self {
        Self { original, segment_a, segment_b, blank, complementary: true }
    }

    /// A quad whose four handles all point at the same image.
    pub fn trivial(image: ImageRef) -> Self {
        Self {
            original: image.clone(),
            segment_a: image.clone(),
            segment_b: image.clone(),
            blank: image,
            complementary: false,
        }
    }

    pub fn refs(&self) -> [&ImageRef; 4] {
        [&self.original, &self.segment_a, &self.segment_b, &self.blank]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Greedy,
    Beam,
    Multinomial,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "beam" => Ok(Self::Beam),
            "multinomial" | "sample" => Ok(Self::Multinomial),
            other => Err(format!("unknown strategy `{other}` (greedy, beam, multinomial)")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Greedy => "greedy",
            Self::Beam => "beam",
            Self::Multinomial => "multinomial",
        })
    }
}

/// Decoding hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HddConfig {
    /// Contrastive weight against the blank stream.
    pub alpha: f64,
    /// Plausibility threshold relative to the original stream's top probability.
    pub beta: f64,
    /// Share of masks (largest first) that form `segment_a`.
    pub segment_fraction: f64,
    pub temperature: f64,
    pub strategy: Strategy,
    pub beam_width: usize,
    pub max_new_tokens: usize,
}

impl Default for HddConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.1,
            segment_fraction: 0.05,
            temperature: 1.0,
            strategy: Strategy::Greedy,
            beam_width: 2,
            max_new_tokens: 64,
        }
    }
}

impl HddConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: String| Err(FusionError::Config(m));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.segment_fraction > 0.0 && self.segment_fraction <= 1.0) {
            return bad(format!("segment_fraction must lie in (0, 1], got {}", self.segment_fraction));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.beam_width == 0 {
            return bad("beam_width must be positive".into());
        }
        if self.max_new_tokens == 0 {
            return bad("max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    SegmentA,
    SegmentB,
}

/// What the fusion did at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub div_a: f64,
    pub div_b: f64,
    pub delta: f64,
    pub selected: Segment,
    pub masked_count: usize,
}

/// JSD (bits) of each segment distribution against the blank distribution.
pub fn segment_divergences(p_a: &[f64], p_b: &[f64], p_blank: &[f64]) -> Result<(f64, f64), DistError> {
    Ok((dist::js_divergence(p_a, p_blank)?, dist::js_divergence(p_b, p_blank)?))
}

/// Picks the more informative segment and the mixing weight. Ties go to `SegmentA`.
pub fn select_segment(div_a: f64, div_b: f64) -> (Segment, f64) {
    let selected = if div_b > div_a { Segment::SegmentB } else { Segment::SegmentA };
    (selected, (div_a - div_b).abs())
}

/// `(1 + α)·img − α·blank`, evaluated as `img + α·(img − blank)` so that
/// equal inputs or `α = 0` return `img` bit-for-bit.
pub fn contrastive_step(logits_img: &[f64], logits_blank: &[f64], alpha: f64) -> Result<Logits, DistError> {
    if logits_img.len() != logits_blank.len() {
        return Err(DistError::InvalidInput(format!(
            "length mismatch: {} vs {}",
            logits_img.len(),
            logits_blank.len()
        )));
    }
    Ok(logits_img.iter().zip(logits_blank).map(|(&x, &y)| x + alpha * (x - y)).collect::<Vec<_>>().into())
}

/// Fuses the four streams for one step. `masked_count` in the returned
/// diagnostics is zero; [`plausibility_mask`] fills it in.
pub fn hdd_fuse(
    logits_original: &[f64],
    logits_a: &[f64],
    logits_b: &[f64],
    logits_blank: &[f64],
    cfg: &HddConfig,
) -> Result<(Logits, StepDiagnostics), FusionError> {
    cfg.validate()?;
    let n = logits_original.len();
    if [logits_a.len(), logits_b.len(), logits_blank.len()].iter().any(|&l| l != n) {
        return Err(DistError::InvalidInput("the four streams differ in vocabulary size".into()).into());
    }
    let t = cfg.temperature;
    let p_a = dist::softmax(logits_a, t)?;
    let p_b = dist::softmax(logits_b, t)?;
    let p_blank = dist::softmax(logits_blank, t)?;
    let (div_a, div_b) = segment_divergences(&p_a, &p_b, &p_blank)?;
    let (selected, delta) = select_segment(div_a, div_b);

    let chosen = match selected {
        Segment::SegmentA => logits_a,
        Segment::SegmentB => logits_b,
    };
    let star_original = contrastive_step(logits_original, logits_blank, cfg.alpha)?;
    let star_segment = contrastive_step(chosen, logits_blank, cfg.alpha)?;
    let fused: Vec<f64> = star_original.iter().zip(star_segment.iter()).map(|(&x, &y)| x + delta * (y - x)).collect();

    let diag = StepDiagnostics { div_a, div_b, delta, selected, masked_count: 0 };
    Ok((fused.into(), diag))
}

/// Masks every token whose original-stream probability falls below
/// `beta · max p`. Returns the masked logits and how many entries were removed.
pub fn plausibility_mask(fused: &[f64], p_original: &Probs, beta: f64) -> Result<(Logits, usize), DistError> {
    if fused.len() != p_original.len() {
        return Err(DistError::InvalidInput(format!("length mismatch: {} vs {}", fused.len(), p_original.len())));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(DistError::InvalidInput(format!("beta must lie in [0, 1], got {beta}")));
    }
    let cutoff = beta * p_original.max();
    let mut masked = 0;
    let out: Vec<f64> = fused
        .iter()
        .zip(p_original.iter())
        .map(|(&l, &p)| {
            if p < cutoff {
                masked += 1;
                f64::NEG_INFINITY
            } else {
                l
            }
        })
        .collect();
    Ok((out.into(), masked))
}
