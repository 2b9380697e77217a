//! Hallucination-disentangled decoding.
//!
//! At every generation step the engine fetches next-token logits for four
//! conditioning images (the original, two complementary segment images and
//! a blank image), picks the segment whose distribution diverges most from
//! the blank one, contrasts both image streams against the blank stream and
//! mixes them. The crate provides the fusion math ([`fusion`]), decoding
//! strategies ([`decode`]), logit backends ([`provider`]), a synthetic
//! vision-language model ([`sim`]), metrics ([`metrics`]) and a benchmark
//! runner ([`runner`]).

pub mod decode;
pub mod dist;
pub mod fusion;
pub mod metrics;
pub mod provider;
pub mod runner;
pub mod sim;
pub mod suite;

pub use decode::{DecodeError, DecodeMode, DecodeState, Decoder};
pub use dist::{js_divergence, kl_divergence, log_softmax, softmax, DistError, Logits, Probs};
pub use fusion::{hdd_fuse, plausibility_mask, HddConfig, ImageQuad, ImageRef, Segment, StepDiagnostics, Strategy};
pub use provider::{LogitProvider, LogitRequest, LogitResponse, ProviderError, TokenId};
