use serde::{Deserialize, Serialize};

use super::{ContextId, ObjectId};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub object: ObjectId,
    /// Fraction of the image area covered by the object.
    pub area: f64,
}

/// A synthetic image: its context word and the objects it contains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub id: u32,
    pub context: ContextId,
    pub objects: Vec<SceneObject>,
}

impl SyntheticScene {
    pub fn new(id: u32, context: ContextId, objects: Vec<SceneObject>) -> Self {
        Self { id, context, objects }
    }

    pub fn area_of(&self, object: ObjectId) -> Option<f64> {
        self.objects.iter().find(|o| o.object == object).map(|o| o.area)
    }

    pub fn contains(&self, object: ObjectId) -> bool {
        self.area_of(object).is_some()
    }

    pub fn present(&self) -> impl Iterator<Item = ObjectId> + '_ {
        self.objects.iter().map(|o| o.object)
    }

    pub fn total_area(&self) -> f64 {
        self.objects.iter().map(|o| o.area).sum()
    }
}

/// Splits a scene into the `⌈fraction·n⌉` largest objects and the rest.
///
/// With `renormalize`, areas inside each part are rescaled to sum to 1, so
/// an object that is small in the full image becomes large in its segment.
/// Ties in area go to the lower object id.
pub fn segment_scene(scene: &SyntheticScene, fraction: f64, renormalize: bool) -> (SyntheticScene, SyntheticScene) {
    let mut sorted = scene.objects.clone();
    sorted.sort_by(|a, b| b.area.total_cmp(&a.area).then(a.object.cmp(&b.object)));
    let n = sorted.len();
    let k = if n == 0 { 0 } else { (((fraction * n as f64) - 1e-9).ceil() as usize).clamp(1, n) };
    let rest = sorted.split_off(k);
    let part = |objects: Vec<SceneObject>| {
        let total: f64 = objects.iter().map(|o| o.area).sum();
        let objects = if renormalize && total > 0.0 {
            objects.into_iter().map(|o| SceneObject { area: o.area / total, ..o }).collect()
        } else {
            objects
        };
        SyntheticScene::new(scene.id, scene.context, objects)
    };
    (part(sorted), part(rest))
}
