use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::{segment_scene, ObjectId, SimSuite, SimWorld, SyntheticScene};
use crate::fusion::ImageRef;
use crate::provider::{LogitProvider, LogitRequest, LogitResponse, ProviderError, TokenId};

pub const YES_TOKEN: TokenId = 0;
pub const NO_TOKEN: TokenId = 1;
pub const EOS_TOKEN: TokenId = 2;
pub const PERIOD_TOKEN: TokenId = 3;
/// Object `o` is emitted as token `OBJECT_TOKEN_BASE + o` in captions.
pub const OBJECT_TOKEN_BASE: TokenId = 4;

/// First prompt token selects the task: `[TASK_POPE, context, object]` or
/// `[TASK_CAPTION, context]`.
pub const TASK_POPE: TokenId = 0;
pub const TASK_CAPTION: TokenId = 1;

/// Logit given to tokens that are not a sensible continuation.
pub const FILLER_LOGIT: f64 = -30.0;

pub const BLANK_REF: &str = "sim:blank";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimView {
    Original,
    SegmentA,
    SegmentB,
    Blank,
}

pub fn sim_ref(scene_id: u32, view: SimView) -> ImageRef {
    let part = match view {
        SimView::Blank => return ImageRef::new(BLANK_REF),
        SimView::Original => "original",
        SimView::SegmentA => "segment-a",
        SimView::SegmentB => "segment-b",
    };
    ImageRef::new(format!("sim:scene-{scene_id:05}/{part}"))
}

/// Inverse of the simulator's image-ref scheme. The scene id is `None` for
/// the blank image.
pub fn parse_sim_ref(image_ref: &str) -> Option<(Option<u32>, SimView)> {
    if image_ref == BLANK_REF {
        return Some((None, SimView::Blank));
    }
    let rest = image_ref.strip_prefix("sim:scene-")?;
    let (id, part) = rest.split_once('/')?;
    let view = match part {
        "original" => SimView::Original,
        "segment-a" => SimView::SegmentA,
        "segment-b" => SimView::SegmentB,
        _ => return None,
    };
    Some((Some(id.parse().ok()?), view))
}

/// The simulator behind the provider interface.
///
/// Responses are a pure function of the request content and the noise
/// seed: the Gaussian noise for a request is drawn from a generator seeded
/// by hashing the request key.
#[derive(Debug, Clone)]
pub struct SimProvider {
    world: Arc<SimWorld>,
    /// `[original, segment_a, segment_b]` per scene id.
    views: HashMap<u32, [SyntheticScene; 3]>,
    noise_seed: u64,
}

impl SimProvider {
    pub fn new(world: Arc<SimWorld>, suite: &SimSuite) -> Self {
        Self::with_scenes(world, &suite.scenes, suite.segment_fraction, suite.seed)
    }

    pub fn with_scenes(
        world: Arc<SimWorld>,
        scenes: &[SyntheticScene],
        segment_fraction: f64,
        noise_seed: u64,
    ) -> Self {
        let renormalize = world.config.renormalize_segments;
        let views = scenes
            .iter()
            .map(|s| {
                let (a, b) = segment_scene(s, segment_fraction, renormalize);
                (s.id, [s.clone(), a, b])
            })
            .collect();
        Self { world, views, noise_seed }
    }

    pub fn world(&self) -> &SimWorld {
        &self.world
    }

    pub fn vocab_size(&self) -> usize {
        OBJECT_TOKEN_BASE as usize + self.world.n_objects()
    }

    fn rng_for(&self, req: &LogitRequest) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.noise_seed.to_le_bytes());
        h.update(req.key().as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn resolve(&self, image_ref: &ImageRef) -> Result<(&SyntheticScene, SimView), ProviderError> {
        static EMPTY: SyntheticScene = SyntheticScene { id: 0, context: 0, objects: Vec::new() };
        let not_found = || ProviderError::NotFound(format!("unknown image `{image_ref}`"));
        let (id, view) = parse_sim_ref(image_ref.as_str()).ok_or_else(not_found)?;
        let Some(id) = id else {
            return Ok((&EMPTY, SimView::Blank));
        };
        let views = self.views.get(&id).ok_or_else(not_found)?;
        let scene = match view {
            SimView::SegmentA => &views[1],
            SimView::SegmentB => &views[2],
            _ => &views[0],
        };
        Ok((scene, view))
    }

    fn check_object(&self, token: TokenId) -> Result<ObjectId, ProviderError> {
        if (token as usize) < self.world.n_objects() {
            Ok(token)
        } else {
            Err(ProviderError::InvalidRequest(format!("unknown object id {token}")))
        }
    }

    fn check_context(&self, token: TokenId) -> Result<u32, ProviderError> {
        if (token as usize) < self.world.prior.n_contexts() {
            Ok(token)
        } else {
            Err(ProviderError::InvalidRequest(format!("unknown context id {token}")))
        }
    }

    fn pope(&self, req: &LogitRequest, scene: &SyntheticScene, view: SimView) -> Result<Vec<f64>, ProviderError> {
        let [_, context, object] = req.prompt_tokens[..] else {
            return Err(ProviderError::InvalidRequest("POPE prompt is [task, context, object]".into()));
        };
        let context = self.check_context(context)?;
        let object = self.check_object(object)?;
        let mut logits = vec![FILLER_LOGIT; self.vocab_size()];
        if !req.prefix_tokens.is_empty() {
            logits[EOS_TOKEN as usize] = 0.0;
            return Ok(logits);
        }
        let noise = Normal::new(0.0, self.world.config.noise_sigma)
            .map_err(|e| ProviderError::InvalidRequest(e.to_string()))?
            .sample(&mut self.rng_for(req));
        let [yes, no] =
            self.world.pope_logits(scene, view, object, context, noise).map_err(ProviderError::InvalidRequest)?;
        logits[YES_TOKEN as usize] = yes;
        logits[NO_TOKEN as usize] = no;
        Ok(logits)
    }

    /// Caption model: sentences of up to `caption_max_objects_per_sentence`
    /// object mentions separated by periods, EOS only between sentences.
    /// Object scores follow the same visual/prior/absence terms as POPE;
    /// already mentioned objects are suppressed.
    fn caption(&self, req: &LogitRequest, scene: &SyntheticScene, view: SimView) -> Result<Vec<f64>, ProviderError> {
        let [_, context] = req.prompt_tokens[..] else {
            return Err(ProviderError::InvalidRequest("caption prompt is [task, context]".into()));
        };
        let context = self.check_context(context)?;
        let cfg = &self.world.config;
        let mut mentioned = BTreeSet::new();
        let mut in_sentence = 0usize;
        let mut sentences = 0usize;
        for &t in &req.prefix_tokens {
            if t == PERIOD_TOKEN {
                sentences += 1;
                in_sentence = 0;
            } else if t >= OBJECT_TOKEN_BASE {
                mentioned.insert(self.check_object(t - OBJECT_TOKEN_BASE)?);
                in_sentence += 1;
            }
        }
        let mut logits = vec![FILLER_LOGIT; self.vocab_size()];
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| ProviderError::InvalidRequest(e.to_string()))?;
        let mut rng = self.rng_for(req);
        let sentence_full = in_sentence >= cfg.caption_max_objects_per_sentence;
        for o in 0..self.world.n_objects() as ObjectId {
            let noise = normal.sample(&mut rng);
            if sentence_full || mentioned.contains(&o) {
                continue;
            }
            let visual = match view {
                SimView::Blank => 0.0,
                _ => cfg.kappa * scene.area_of(o).unwrap_or(0.0),
            };
            let absent = view == SimView::Original && !scene.contains(o);
            let penalty = if absent { cfg.absence_evidence } else { 0.0 };
            logits[(OBJECT_TOKEN_BASE + o) as usize] =
                visual + self.world.prior.get(o, context) - penalty - cfg.caption_object_bias + noise;
        }
        if in_sentence == 0 {
            logits[EOS_TOKEN as usize] = cfg.caption_eos_bias + cfg.caption_eos_slope * sentences as f64;
        } else {
            logits[PERIOD_TOKEN as usize] = if sentence_full { 10.0 } else { cfg.caption_period_bias };
        }
        Ok(logits)
    }
}

impl LogitProvider for SimProvider {
    fn fetch_logits(&self, req: &LogitRequest) -> Result<LogitResponse, ProviderError> {
        let (scene, view) = self.resolve(&req.image_ref)?;
        let logits = match req.prompt_tokens.first() {
            Some(&TASK_POPE) => self.pope(req, scene, view)?,
            Some(&TASK_CAPTION) => self.caption(req, scene, view)?,
            _ => return Err(ProviderError::InvalidRequest("unknown task token".into())),
        };
        Ok(LogitResponse { request_id: req.request_id, vocab_size: logits.len(), logits, eos_token_id: EOS_TOKEN })
    }

    fn describe(&self) -> String {
        format!(
            "synthetic(world_seed={}, noise_seed={}, scenes={})",
            self.world.config.world_seed,
            self.noise_seed,
            self.views.len()
        )
    }
}
