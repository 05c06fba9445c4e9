use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_ENTITIES: usize = 24;
pub const NUM_LAYERS: usize = 8;
pub const SLICES_PER_LAYER: usize = 3;
pub const NUM_SLICES: usize = NUM_LAYERS * SLICES_PER_LAYER;
pub const SLICE_SIZE: usize = 32;

/// Keyword vocabulary of the 24 findings entities.
pub const ENTITY_NAMES: [&str; NUM_ENTITIES] = [
    "frontal_lobe",
    "parietal_lobe",
    "temporal_lobe",
    "occipital_lobe",
    "basal_ganglia",
    "thalamus",
    "internal_capsule",
    "lateral_ventricle",
    "third_ventricle",
    "fourth_ventricle",
    "brainstem",
    "cerebellum",
    "midline_structure",
    "corpus_callosum",
    "sulci",
    "cistern",
    "centrum_semiovale",
    "insula",
    "pons",
    "midbrain",
    "skull",
    "scalp",
    "paranasal_sinus",
    "white_matter",
];

/// Per-quadrant home centroids `(x, y)`; quadrants are far enough apart that
/// planted shapes on a shared slice never touch.
pub const HOMES: [(f64, f64); 4] = [(8.0, 8.0), (23.0, 8.0), (8.0, 23.0), (23.0, 23.0)];

const BANDS: [(f64, f64); 3] = [(0.55, 0.65), (0.70, 0.80), (0.85, 0.95)];

pub const NAME_SLOT: &str = "{name}";
pub const NORMAL_TEMPLATE: &str = "{name} is normal .";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Ring,
}

impl ShapeFamily {
    pub fn abnormal_template(self) -> &'static str {
        match self {
            ShapeFamily::Ellipse => "{name} shows an oval hyperdense lesion .",
            ShapeFamily::Rectangle => "{name} shows a patchy high density shadow .",
            ShapeFamily::Ring => "{name} shows a ring enhancing lesion .",
        }
    }

    /// Mean sqrt(area) in pixels of a planted shape, measured over 3000
    /// generated samples.
    pub fn expected_sqrt_area(self) -> f64 {
        match self {
            ShapeFamily::Ellipse => 7.06,
            ShapeFamily::Rectangle => 6.88,
            ShapeFamily::Ring => 8.12,
        }
    }

    /// Mean second-moment eccentricity, measured like `expected_sqrt_area`.
    pub fn expected_eccentricity(self) -> f64 {
        match self {
            ShapeFamily::Ellipse => 0.855,
            ShapeFamily::Rectangle => 0.483,
            ShapeFamily::Ring => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntitySpec {
    pub entity_id: usize,
    pub name: String,
    pub layers: Vec<usize>,
    pub shape_family: ShapeFamily,
    pub intensity_band: (f64, f64),
    pub home: (f64, f64),
    pub abnormal_template: String,
    pub normal_template: String,
}

impl EntitySpec {
    pub fn abnormal_sentence(&self) -> String {
        self.abnormal_template.replace(NAME_SLOT, &self.name)
    }

    pub fn normal_sentence(&self) -> String {
        self.normal_template.replace(NAME_SLOT, &self.name)
    }

    pub fn band_mid(&self) -> f64 {
        (self.intensity_band.0 + self.intensity_band.1) / 2.0
    }

    pub fn mean_layer(&self) -> f64 {
        self.layers.iter().sum::<usize>() as f64 / self.layers.len() as f64
    }
}

/// Slice/layer/entity correspondence. Layer `k` covers slices
/// `3k, 3k+1, 3k+2`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMap {
    layer_entities: Vec<Vec<usize>>,
    entity_layers: Vec<Vec<usize>>,
}

impl LayerMap {
    pub fn from_entity_layers(entity_layers: Vec<Vec<usize>>) -> Self {
        let mut layer_entities = vec![Vec::new(); NUM_LAYERS];
        for (e, layers) in entity_layers.iter().enumerate() {
            for &l in layers {
                layer_entities[l].push(e);
            }
        }
        Self {
            layer_entities,
            entity_layers,
        }
    }

    pub fn layer_of_slice(slice: usize) -> usize {
        slice / SLICES_PER_LAYER
    }

    pub fn slices_of_layer(layer: usize) -> std::ops::Range<usize> {
        layer * SLICES_PER_LAYER..(layer + 1) * SLICES_PER_LAYER
    }

    pub fn layers(&self, entity: usize) -> &[usize] {
        &self.entity_layers[entity]
    }

    pub fn entities(&self, layer: usize) -> &[usize] {
        &self.layer_entities[layer]
    }

    /// Slice indices covered by an entity's layers, ascending.
    pub fn slices(&self, entity: usize) -> Vec<usize> {
        let set: BTreeSet<usize> = self.entity_layers[entity]
            .iter()
            .flat_map(|&l| Self::slices_of_layer(l))
            .collect();
        set.into_iter().collect()
    }

    pub fn slice_in_entity_layers(&self, entity: usize, slice: usize) -> bool {
        self.entity_layers[entity].contains(&Self::layer_of_slice(slice))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub seed: u64,
    pub entities: Vec<EntitySpec>,
    pub layer_map: LayerMap,
}

impl Registry {
    pub fn entity(&self, id: usize) -> Option<&EntitySpec> {
        self.entities.get(id)
    }

    pub fn by_name(&self, name: &str) -> Option<&EntitySpec> {
        self.entities.iter().find(|e| e.name == name)
    }

    pub fn keywords(&self) -> Vec<String> {
        self.entities.iter().map(|e| e.name.clone()).collect()
    }

    /// The single registered entity mentioned in `text`, by whitespace token.
    pub fn entity_in(&self, text: &str) -> Option<&EntitySpec> {
        let mut found = None;
        for tok in text.split_whitespace() {
            if let Some(e) = self.by_name(tok) {
                if found.is_some_and(|f: &EntitySpec| f.entity_id != e.entity_id) {
                    return None;
                }
                found = Some(e);
            }
        }
        found
    }
}

/// Builds the 24-entity registry.
///
/// Layer `k` natively hosts entities `3k..3k+3`; the third entity of every
/// even layer also extends into the following odd layer. The seed only
/// permutes which keyword names which entity slot.
pub fn make_registry(seed: u64) -> (Registry, LayerMap) {
    let mut names: Vec<&str> = ENTITY_NAMES.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0fe1);
    names.shuffle(&mut rng);

    let mut entity_layers = Vec::with_capacity(NUM_ENTITIES);
    let mut entities = Vec::with_capacity(NUM_ENTITIES);
    for (e, name) in names.into_iter().enumerate() {
        let home_layer = e / 3;
        let mut layers = vec![home_layer];
        if e % 3 == 2 && home_layer % 2 == 0 {
            layers.push(home_layer + 1);
        }
        let shape_family = match (e + e / 3) % 3 {
            0 => ShapeFamily::Ellipse,
            1 => ShapeFamily::Rectangle,
            _ => ShapeFamily::Ring,
        };
        entity_layers.push(layers.clone());
        entities.push(EntitySpec {
            entity_id: e,
            name: name.to_string(),
            layers,
            shape_family,
            intensity_band: BANDS[e % 3],
            home: HOMES[e % 4],
            abnormal_template: shape_family.abnormal_template().to_string(),
            normal_template: NORMAL_TEMPLATE.to_string(),
        });
    }
    let layer_map = LayerMap::from_entity_layers(entity_layers);
    (
        Registry {
            seed,
            entities,
            layer_map: layer_map.clone(),
        },
        layer_map,
    )
}
