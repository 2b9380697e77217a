use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::provider::{sim_ref, SimView, OBJECT_TOKEN_BASE, PERIOD_TOKEN, TASK_CAPTION, TASK_POPE};
use super::{ObjectId, SceneObject, SimWorld, SyntheticScene, NO_TOKEN, YES_TOKEN};
use crate::fusion::ImageQuad;
use crate::suite::{Suite, SuiteItem, TaskKind, Truth, Vocabulary};

/// How absent objects are chosen for the "no" half of a POPE suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    /// Uniformly among objects not in the scene.
    Random,
    /// The most frequent objects across the suite's scenes.
    Popular,
    /// The objects with the strongest prior under the scene's context.
    Adversarial,
}

impl Subset {
    pub const ALL: [Subset; 3] = [Subset::Random, Subset::Popular, Subset::Adversarial];
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Random => "random",
            Subset::Popular => "popular",
            Subset::Adversarial => "adversarial",
        })
    }
}

impl FromStr for Subset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Subset::Random),
            "popular" => Ok(Subset::Popular),
            "adversarial" => Ok(Subset::Adversarial),
            other => Err(format!("unknown subset `{other}` (expected random, popular or adversarial)")),
        }
    }
}

/// A generated suite together with the scenes it refers to. The scenes are
/// what a [`super::SimProvider`] needs to answer requests for the suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSuite {
    pub seed: u64,
    pub segment_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<Subset>,
    pub scenes: Vec<SyntheticScene>,
    pub suite: Suite,
}

/// Draws `n` scenes. Composition favors popular objects and objects at home
/// in the scene's context; areas are log-normal sizes scaled to a random
/// total coverage.
pub fn generate_scenes(world: &SimWorld, n: usize, rng: &mut impl Rng) -> Vec<SyntheticScene> {
    let cfg = &world.config;
    let k = world.n_objects();
    let sizes = LogNormal::new(0.0, cfg.area_log_sigma).expect("valid log-normal sigma");
    (0..n)
        .map(|i| {
            let context = rng.random_range(1..=cfg.n_contexts as u32);
            let m = rng.random_range(cfg.min_objects..=cfg.max_objects).min(k);
            let picked = index::sample_weighted(
                rng,
                k,
                |o| world.popularity[o] * (1.0 + cfg.scene_affinity_bias * world.affinity[o][context as usize]),
                m,
            )
            .expect("positive weights");
            let mut ids: Vec<ObjectId> = picked.into_iter().map(|o| o as ObjectId).collect();
            ids.sort_unstable();
            let raw: Vec<f64> = ids.iter().map(|_| sizes.sample(rng)).collect();
            let total: f64 = raw.iter().sum();
            let coverage = rng.random_range(cfg.coverage.0..=cfg.coverage.1);
            let objects =
                ids.iter().zip(&raw).map(|(&object, r)| SceneObject { object, area: coverage * r / total }).collect();
            SyntheticScene::new(i as u32, context, objects)
        })
        .collect()
}

/// How many scenes contain each object.
pub fn object_frequencies(world: &SimWorld, scenes: &[SyntheticScene]) -> Vec<usize> {
    let mut freq = vec![0; world.n_objects()];
    for s in scenes {
        for o in s.present() {
            freq[o as usize] += 1;
        }
    }
    freq
}

/// Up to `count` absent objects for `scene` under the given subset rule.
pub fn pick_negatives(
    world: &SimWorld,
    scene: &SyntheticScene,
    subset: Subset,
    frequencies: &[usize],
    count: usize,
    rng: &mut impl Rng,
) -> Vec<ObjectId> {
    let mut absent: Vec<ObjectId> = (0..world.n_objects() as ObjectId).filter(|&o| !scene.contains(o)).collect();
    match subset {
        Subset::Random => {
            return absent.choose_multiple(rng, count).copied().collect();
        }
        Subset::Popular => {
            absent.sort_by(|&a, &b| frequencies[b as usize].cmp(&frequencies[a as usize]).then(a.cmp(&b)));
        }
        Subset::Adversarial => {
            let prior = |o: ObjectId| world.prior.get(o, scene.context);
            absent.sort_by(|&a, &b| prior(b).total_cmp(&prior(a)).then(a.cmp(&b)));
        }
    }
    absent.truncate(count);
    absent
}

fn quad_for(scene_id: u32) -> ImageQuad {
    ImageQuad::new(
        sim_ref(scene_id, SimView::Original),
        sim_ref(scene_id, SimView::SegmentA),
        sim_ref(scene_id, SimView::SegmentB),
        sim_ref(0, SimView::Blank),
    )
}

fn vocabulary(world: &SimWorld) -> Vocabulary {
    let mut token_text = BTreeMap::new();
    token_text.insert(YES_TOKEN, "Yes".to_string());
    token_text.insert(NO_TOKEN, "No".to_string());
    token_text.insert(PERIOD_TOKEN, ".".to_string());
    for (i, name) in world.object_names.iter().enumerate() {
        token_text.insert(OBJECT_TOKEN_BASE + i as u32, name.clone());
    }
    Vocabulary { token_text, sentence_end: Some(PERIOD_TOKEN) }
}

/// Balanced POPE suite: per scene, up to `queries_per_polarity` present
/// objects and as many absent ones chosen by `subset`.
pub fn make_pope_suite(
    world: &SimWorld,
    n_scenes: usize,
    subset: Subset,
    seed: u64,
    segment_fraction: f64,
) -> SimSuite {
    assert!(n_scenes > 0, "suite needs at least one scene");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = generate_scenes(world, n_scenes, &mut rng);
    let freq = object_frequencies(world, &scenes);
    let q = world.config.queries_per_polarity;
    let mut items = Vec::with_capacity(n_scenes * 2 * q);
    for scene in &scenes {
        let present: Vec<ObjectId> = scene.present().collect();
        let positives: Vec<ObjectId> = present.choose_multiple(&mut rng, q).copied().collect();
        let negatives = pick_negatives(world, scene, subset, &freq, positives.len(), &mut rng);
        let queries = positives.iter().map(|&o| (o, true)).chain(negatives.iter().map(|&o| (o, false)));
        for (j, (object, present)) in queries.enumerate() {
            items.push(SuiteItem {
                id: format!("scene-{:05}-q{j}", scene.id),
                quad: quad_for(scene.id),
                prompt_tokens: vec![TASK_POPE, scene.context, object],
                truth: Truth::Pope { object: world.object_name(object).to_string(), present },
            });
        }
    }
    let name = format!("sim-pope-{subset}-n{n_scenes}-seed{seed}");
    SimSuite {
        seed,
        segment_fraction,
        subset: Some(subset),
        scenes,
        suite: Suite::new(name, TaskKind::Pope, vocabulary(world), items),
    }
}

/// One captioning request per scene.
pub fn make_caption_suite(world: &SimWorld, n_scenes: usize, seed: u64, segment_fraction: f64) -> SimSuite {
    assert!(n_scenes > 0, "suite needs at least one scene");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = generate_scenes(world, n_scenes, &mut rng);
    let items = scenes
        .iter()
        .map(|scene| SuiteItem {
            id: format!("scene-{:05}", scene.id),
            quad: quad_for(scene.id),
            prompt_tokens: vec![TASK_CAPTION, scene.context],
            truth: Truth::Caption { objects: scene.present().map(|o| world.object_name(o).to_string()).collect() },
        })
        .collect();
    SimSuite {
        seed,
        segment_fraction,
        subset: None,
        scenes,
        suite: Suite::new(format!("sim-caption-n{n_scenes}-seed{seed}"), TaskKind::Caption, vocabulary(world), items),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::SimConfig;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn world() -> SimWorld {
        SimWorld::new(SimConfig::default())
    }

    #[test]
    fn scenes_respect_area_and_size_bounds() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for s in generate_scenes(&w, 200, &mut rng) {
            assert!((3..=7).contains(&s.objects.len()));
            assert!(s.total_area() <= 1.0 + 1e-12);
            assert!(s.objects.iter().all(|o| o.area > 0.0 && o.area <= 1.0));
            assert!(s.context >= 1 && s.context as usize <= w.config.n_contexts);
        }
    }

    #[test]
    fn suites_are_deterministic_and_balanced() {
        let w = world();
        for subset in Subset::ALL {
            let a = make_pope_suite(&w, 30, subset, 7, 0.05);
            assert_eq!(a, make_pope_suite(&w, 30, subset, 7, 0.05));
            assert_ne!(a.suite.items, make_pope_suite(&w, 30, subset, 8, 0.05).suite.items);
            let yes = a.suite.items.iter().filter(|i| matches!(i.truth, Truth::Pope { present: true, .. })).count();
            assert_eq!(2 * yes, a.suite.len());
        }
    }

    #[test]
    fn ground_truth_matches_scene() {
        let w = world();
        let s = make_pope_suite(&w, 40, Subset::Adversarial, 3, 0.05);
        for item in &s.suite.items {
            let scene = &s.scenes[item.id[6..11].parse::<usize>().unwrap()];
            let Truth::Pope { present, .. } = item.truth else { unreachable!() };
            assert_eq!(scene.contains(item.prompt_tokens[2]), present);
            assert_eq!(scene.context, item.prompt_tokens[1]);
        }
    }

    #[test]
    fn random_negatives_are_uniform() {
        let w = world();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let scene = generate_scenes(&w, 1, &mut rng).remove(0);
        let absent: Vec<ObjectId> = (0..w.n_objects() as ObjectId).filter(|&o| !scene.contains(o)).collect();
        let mut counts = vec![0usize; w.n_objects()];
        let draws = 10_000;
        for _ in 0..draws {
            let picked = pick_negatives(&w, &scene, Subset::Random, &[], 1, &mut rng);
            counts[picked[0] as usize] += 1;
        }
        let expected = draws as f64 / absent.len() as f64;
        let stat: f64 = absent.iter().map(|&o| (counts[o as usize] as f64 - expected).powi(2) / expected).sum();
        let p = 1.0 - ChiSquared::new((absent.len() - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi-square p = {p}");
        assert!(scene.present().all(|o| counts[o as usize] == 0));
    }

    fn mean_negative_prior(w: &SimWorld, s: &SimSuite) -> f64 {
        let negs: Vec<f64> = s
            .suite
            .items
            .iter()
            .filter(|i| matches!(i.truth, Truth::Pope { present: false, .. }))
            .map(|i| w.prior.get(i.prompt_tokens[2], i.prompt_tokens[1]))
            .collect();
        negs.iter().sum::<f64>() / negs.len() as f64
    }

    #[test]
    fn adversarial_negatives_have_higher_prior() {
        let w = world();
        for seed in [1, 2, 3] {
            let adv = make_pope_suite(&w, 100, Subset::Adversarial, seed, 0.05);
            let rnd = make_pope_suite(&w, 100, Subset::Random, seed, 0.05);
            assert!(mean_negative_prior(&w, &adv) > mean_negative_prior(&w, &rnd));
        }
    }

    #[test]
    fn popular_negatives_follow_frequency() {
        let w = world();
        let s = make_pope_suite(&w, 50, Subset::Popular, 5, 0.05);
        let freq = object_frequencies(&w, &s.scenes);
        let scene = &s.scenes[0];
        let negs = pick_negatives(&w, scene, Subset::Popular, &freq, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let min_picked = negs.iter().map(|&o| freq[o as usize]).min().unwrap();
        for o in 0..w.n_objects() as ObjectId {
            if !scene.contains(o) && !negs.contains(&o) {
                assert!(freq[o as usize] <= min_picked);
            }
        }
    }

    #[test]
    fn caption_suite_lists_scene_objects() {
        let w = world();
        let s = make_caption_suite(&w, 5, 1, 0.05);
        assert_eq!(s.suite.len(), 5);
        for (item, scene) in s.suite.items.iter().zip(&s.scenes) {
            let Truth::Caption { objects } = &item.truth else { unreachable!() };
            assert_eq!(objects.len(), scene.objects.len());
        }
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<SimSuite>(&json).unwrap(), s);
    }

    #[test]
    fn subset_parses() {
        for s in Subset::ALL {
            assert_eq!(s.to_string().parse::<Subset>().unwrap(), s);
        }
    }
}
