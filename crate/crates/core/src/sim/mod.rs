//! Synthetic vision-language model.
//!
//! The simulator reproduces two failure mechanisms of real models:
//!
//! * visual sensitivity proportional to an object's share of the image area
//!   (`κ · A_i / A_all`), so small objects are easy to miss;
//! * a co-occurrence language prior indexed by the scene's context word,
//!   which biases answers even when no image is shown.
//!
//! Segment images are sub-scenes whose areas are renormalized to the
//! sub-scene total, which is how the simulator models "segmentation enlarges
//! the queried entity". The full image additionally carries evidence of
//! absence for objects it does not contain; isolated segment cut-outs and
//! the blank image do not.

mod provider;
mod scene;
mod suite;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use provider::{
    parse_sim_ref, sim_ref, SimProvider, SimView, BLANK_REF, EOS_TOKEN, FILLER_LOGIT, NO_TOKEN, OBJECT_TOKEN_BASE,
    PERIOD_TOKEN, TASK_CAPTION, TASK_POPE, YES_TOKEN,
};
pub use scene::{segment_scene, SceneObject, SyntheticScene};
pub use suite::{
    generate_scenes, make_caption_suite, make_pope_suite, object_frequencies, pick_negatives, SimSuite, Subset,
};

pub type ObjectId = u32;
pub type ContextId = u32;

/// Context id with no co-occurrence bias ("In this picture, ...").
pub const NEUTRAL_CONTEXT: ContextId = 0;

const OBJECT_NAMES: [&str; 40] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "bus",
    "truck",
    "traffic light",
    "stop sign",
    "bench",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "backpack",
    "umbrella",
    "handbag",
    "suitcase",
    "frisbee",
    "skis",
    "surfboard",
    "kite",
    "bottle",
    "cup",
    "fork",
    "knife",
    "bowl",
    "banana",
    "pizza",
    "chair",
    "couch",
    "potted plant",
    "bed",
    "dining table",
    "tv",
    "laptop",
    "cell phone",
    "oven",
    "refrigerator",
];

const CONTEXT_NAMES: [&str; 9] = [
    "in this picture",
    "on the road",
    "in the kitchen",
    "at the beach",
    "in the park",
    "in the office",
    "on the farm",
    "in the living room",
    "at the airport",
];

/// Simulator knobs. Defaults are the calibrated constants used by the
/// benchmark suites; none of them is a claim about any real model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Visual sensitivity: yes-logit gain per unit area fraction.
    pub kappa: f64,
    /// Standard deviation of the per-request Gaussian noise on answer logits.
    pub noise_sigma: f64,
    /// Extra "no" evidence the full image provides for an object it lacks.
    pub absence_evidence: f64,
    /// Constant "no" logit shared by every stream.
    pub no_bias: f64,
    /// Prior contribution of context affinity.
    pub affinity_weight: f64,
    /// Prior contribution of global object popularity.
    pub popularity_weight: f64,
    pub prior_offset: f64,
    /// Lower bound of an object's affinity to its home contexts (upper bound is 1).
    pub affinity_floor: f64,
    pub n_objects: usize,
    pub n_contexts: usize,
    pub world_seed: u64,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Log-normal sigma of raw object sizes.
    pub area_log_sigma: f64,
    /// Range of total object coverage of an image.
    pub coverage: (f64, f64),
    /// How strongly scene composition favors objects at home in the context.
    pub scene_affinity_bias: f64,
    /// Renormalize segment areas to the sub-scene total. `false` keeps
    /// absolute areas (ablation).
    pub renormalize_segments: bool,
    /// Yes- and no-queries per scene in POPE suites.
    pub queries_per_polarity: usize,
    /// Constant subtracted from caption object logits.
    pub caption_object_bias: f64,
    pub caption_period_bias: f64,
    pub caption_eos_bias: f64,
    /// EOS logit gain per completed caption sentence.
    pub caption_eos_slope: f64,
    pub caption_max_objects_per_sentence: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            kappa: 5.0,
            noise_sigma: 0.25,
            absence_evidence: 2.76,
            no_bias: 2.9,
            affinity_weight: 6.61,
            popularity_weight: 1.25,
            prior_offset: 1.22,
            affinity_floor: 0.81,
            n_objects: OBJECT_NAMES.len(),
            n_contexts: CONTEXT_NAMES.len() - 1,
            world_seed: 0,
            min_objects: 3,
            max_objects: 7,
            area_log_sigma: 1.0,
            coverage: (0.6, 0.95),
            scene_affinity_bias: 16.0,
            renormalize_segments: true,
            queries_per_polarity: 3,
            caption_object_bias: 2.8,
            caption_period_bias: 1.0,
            caption_eos_bias: -1.0,
            caption_eos_slope: 1.0,
            caption_max_objects_per_sentence: 2,
        }
    }
}

/// Object-by-context co-occurrence biases. Column 0 is the neutral context
/// and is identically zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorMatrix {
    n_objects: usize,
    n_contexts: usize,
    values: Vec<f64>,
}

impl PriorMatrix {
    pub fn new(n_objects: usize, n_contexts: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n_objects * n_contexts, "prior matrix shape");
        Self { n_objects, n_contexts, values }
    }

    pub fn get(&self, object: ObjectId, context: ContextId) -> f64 {
        self.values[object as usize * self.n_contexts + context as usize]
    }

    pub fn n_objects(&self) -> usize {
        self.n_objects
    }

    /// Number of contexts including the neutral one.
    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }
}

/// The fixed vocabulary, popularity and prior of a simulated model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimWorld {
    pub config: SimConfig,
    pub object_names: Vec<String>,
    pub context_names: Vec<String>,
    /// Global popularity in `(0, 1]`, used for scene composition and the prior.
    pub popularity: Vec<f64>,
    /// `affinity[o][c]`, zero outside an object's home contexts.
    pub affinity: Vec<Vec<f64>>,
    pub prior: PriorMatrix,
}

impl SimWorld {
    pub fn new(config: SimConfig) -> Self {
        assert!(config.n_objects > 0 && config.n_contexts > 0, "empty world");
        assert!(config.min_objects >= 1 && config.min_objects <= config.max_objects, "bad scene size range");
        let mut rng = ChaCha8Rng::seed_from_u64(config.world_seed);
        let k = config.n_objects;
        let c = config.n_contexts + 1;

        let object_names =
            (0..k).map(|i| OBJECT_NAMES.get(i).map_or_else(|| format!("object-{i}"), |s| s.to_string())).collect();
        let context_names =
            (0..c).map(|i| CONTEXT_NAMES.get(i).map_or_else(|| format!("context-{i}"), |s| s.to_string())).collect();

        let mut popularity: Vec<f64> = (1..=k).map(|r| 1.0 / (r as f64).powf(0.8)).collect();
        popularity.shuffle(&mut rng);

        let mut affinity = vec![vec![0.0; c]; k];
        let contexts: Vec<usize> = (1..c).collect();
        for row in affinity.iter_mut() {
            let homes = rng.random_range(1..=2usize).min(contexts.len());
            for &h in contexts.choose_multiple(&mut rng, homes) {
                row[h] = if config.affinity_floor >= 1.0 { 1.0 } else { rng.random_range(config.affinity_floor..1.0) };
            }
        }

        let mut values = vec![0.0; k * c];
        for o in 0..k {
            for ctx in 1..c {
                values[o * c + ctx] = config.affinity_weight * affinity[o][ctx]
                    + config.popularity_weight * popularity[o]
                    - config.prior_offset;
            }
        }
        Self { config, object_names, context_names, popularity, affinity, prior: PriorMatrix::new(k, c, values) }
    }

    pub fn n_objects(&self) -> usize {
        self.object_names.len()
    }

    pub fn object_name(&self, object: ObjectId) -> &str {
        &self.object_names[object as usize]
    }

    /// Answer logits `[yes, no]` for a POPE query against one view.
    ///
    /// `yes = κ·area·[visible] + prior(target, context) + noise`; the blank
    /// view has no visual term. `no` is the shared bias plus, for the full
    /// image only, the absence evidence when the target is not in the scene.
    pub fn pope_logits(
        &self,
        scene: &SyntheticScene,
        view: SimView,
        target: ObjectId,
        context: ContextId,
        noise: f64,
    ) -> Result<[f64; 2], String> {
        self.check_ids(target, context)?;
        let cfg = &self.config;
        let visual = match view {
            SimView::Blank => 0.0,
            _ => cfg.kappa * scene.area_of(target).unwrap_or(0.0),
        };
        let yes = visual + self.prior.get(target, context) + noise;
        let absent = view == SimView::Original && scene.area_of(target).is_none();
        let no = cfg.no_bias + if absent { cfg.absence_evidence } else { 0.0 };
        Ok([yes, no])
    }

    fn check_ids(&self, target: ObjectId, context: ContextId) -> Result<(), String> {
        if target as usize >= self.n_objects() {
            return Err(format!("unknown object id {target}"));
        }
        if context as usize >= self.prior.n_contexts() {
            return Err(format!("unknown context id {context}"));
        }
        Ok(())
    }

    /// Context most associated with `object` (highest prior).
    pub fn strongest_context(&self, object: ObjectId) -> ContextId {
        (1..self.prior.n_contexts() as ContextId)
            .max_by(|&a, &b| self.prior.get(object, a).total_cmp(&self.prior.get(object, b)).then(b.cmp(&a)))
            .unwrap_or(NEUTRAL_CONTEXT)
    }
}
