use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::lexicon::{AGENTS, COLORS, NUM_OBJECT_NOUNS, SCENERY, THINGS};
use crate::error::{Error, Result};

/// Relation ids 0..8 pair with the thing of the same index; `NEAR` links the
/// agent to scenery.
pub const NUM_MAIN_RELATIONS: usize = THINGS.len();
pub const NEAR: usize = NUM_MAIN_RELATIONS;

pub const MAX_OBJECTS: usize = 6;
const ANIMALS: usize = 3;
/// Things an animal agent can be paired with.
const ANIMAL_THINGS: [usize; 4] = [0, 1, 6, 7];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Index into agents, then things, then scenery.
    pub noun: usize,
    pub color: usize,
    /// x, y, width, height in [0, 1].
    pub position: [f32; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub relation: usize,
    pub object: usize,
}

/// Objects and relations of one synthetic image. Object 0 is the agent,
/// object 1 the thing it interacts with, the rest scenery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
}

impl Scene {
    pub fn agent(&self) -> usize {
        self.objects[0].noun
    }

    pub fn is_animal_agent(&self) -> bool {
        self.agent() < ANIMALS
    }

    /// Thing index (0..8) of object 1, if present.
    pub fn thing(&self) -> Option<usize> {
        self.objects.get(1).map(|o| o.noun - AGENTS.len())
    }

    /// Scenery objects ordered left to right.
    pub fn scenery_left_to_right(&self) -> Vec<&SceneObject> {
        let mut s: Vec<&SceneObject> = self.objects.iter().skip(2).collect();
        s.sort_by(|a, b| a.position[0].total_cmp(&b.position[0]));
        s
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.objects.len();
        if !(2..=MAX_OBJECTS).contains(&k) {
            return Err(Error::Contract(format!(
                "scene has {k} objects, expected 2..=6"
            )));
        }
        for r in &self.relations {
            if r.subject >= k || r.object >= k {
                return Err(Error::Contract(format!("relation {r:?} out of range")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub num_colors: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            min_objects: 3,
            max_objects: 6,
            num_colors: COLORS.len(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_colors == 0 || self.num_colors > COLORS.len() {
            return Err(Error::Config(format!(
                "num_colors must be in 1..={}, got {}",
                COLORS.len(),
                self.num_colors
            )));
        }
        if self.min_objects < 2
            || self.min_objects > self.max_objects
            || self.max_objects > MAX_OBJECTS
        {
            return Err(Error::Config(format!(
                "object range [{}, {}] must lie within [2, 6]",
                self.min_objects, self.max_objects
            )));
        }
        Ok(())
    }
}

fn position<R: Rng>(rng: &mut R) -> [f32; 4] {
    [
        rng.random_range(0.0..0.8),
        rng.random_range(0.0..0.8),
        rng.random_range(0.1..0.2),
        rng.random_range(0.1..0.2),
    ]
}

pub fn generate_scene<R: Rng>(rng: &mut R, config: &SceneConfig, scene_id: u64) -> Result<Scene> {
    config.validate()?;
    let k = rng.random_range(config.min_objects..=config.max_objects);
    let agent = rng.random_range(0..AGENTS.len());
    let thing = if agent < ANIMALS {
        ANIMAL_THINGS[rng.random_range(0..ANIMAL_THINGS.len())]
    } else {
        rng.random_range(0..THINGS.len())
    };
    let mut nouns = vec![agent, AGENTS.len() + thing];
    nouns.extend(
        sample(rng, SCENERY.len(), k - 2)
            .into_iter()
            .map(|s| AGENTS.len() + THINGS.len() + s),
    );
    let objects = nouns
        .into_iter()
        .map(|noun| SceneObject {
            noun,
            color: rng.random_range(0..config.num_colors),
            position: position(rng),
        })
        .collect();
    let mut relations = vec![Relation {
        subject: 0,
        relation: thing,
        object: 1,
    }];
    relations.extend((2..k).map(|j| Relation {
        subject: 0,
        relation: NEAR,
        object: j,
    }));
    Ok(Scene {
        scene_id,
        objects,
        relations,
    })
}

/// Width of the per-object descriptor fed to the projection.
pub const DESCRIPTOR_WIDTH: usize = NUM_OBJECT_NOUNS + COLORS.len() + 4;

/// Fixed random projection from object descriptors to region features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureProjector {
    dim: usize,
    /// Row-major `dim × DESCRIPTOR_WIDTH`.
    matrix: Vec<f32>,
}

impl FeatureProjector {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let normal = Normal::new(0.0f32, 0.5).expect("valid normal");
        let matrix = (0..dim * DESCRIPTOR_WIDTH)
            .map(|_| normal.sample(rng))
            .collect();
        Ok(FeatureProjector { dim, matrix })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn descriptor(o: &SceneObject) -> [f32; DESCRIPTOR_WIDTH] {
        let mut d = [0.0f32; DESCRIPTOR_WIDTH];
        d[o.noun] = 1.0;
        d[NUM_OBJECT_NOUNS + o.color] = 1.0;
        d[NUM_OBJECT_NOUNS + COLORS.len()..].copy_from_slice(&o.position);
        d
    }

    /// Noise-free feature of one object.
    pub fn project(&self, o: &SceneObject) -> Vec<f32> {
        let d = Self::descriptor(o);
        self.matrix
            .chunks_exact(DESCRIPTOR_WIDTH)
            .map(|row| row.iter().zip(&d).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Region feature vectors of one scene, one per object.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionFeatureSet {
    pub scene_id: u64,
    pub features: Vec<Vec<f32>>,
}

impl RegionFeatureSet {
    pub fn num_regions(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Row-major `k × D_f` copy.
    pub fn flat(&self) -> Vec<f32> {
        self.features.concat()
    }
}

pub fn region_features<R: Rng>(
    scene: &Scene,
    projector: &FeatureProjector,
    sigma: f32,
    rng: &mut R,
) -> Result<RegionFeatureSet> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise sigma must be finite and >= 0, got {sigma}"
        )));
    }
    let noise = Normal::new(0.0f32, sigma).expect("checked sigma");
    let features = scene
        .objects
        .iter()
        .map(|o| {
            let mut f = projector.project(o);
            if sigma > 0.0 {
                for x in &mut f {
                    *x += noise.sample(rng);
                }
            }
            f
        })
        .collect();
    Ok(RegionFeatureSet {
        scene_id: scene.scene_id,
        features,
    })
}
