use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::registry::{LayerMap, Registry, ShapeFamily, NUM_ENTITIES, NUM_SLICES, SLICE_SIZE};
use crate::raster::{quantize, Grid, Mask};

/// Background noise is scaled into `[0, BACKGROUND_MAX]`.
pub const BACKGROUND_MAX: f64 = 0.29;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorConfig {
    /// Upper bound on present entities per sample.
    pub max_entities: usize,
    /// Expected number of present entities (binomial mean).
    pub mean_entities: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            max_entities: 6,
            mean_entities: 3.0,
        }
    }
}

/// One synthetic patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub sample_id: String,
    pub seed: u64,
    pub slices: Vec<Grid>,
    /// Present entity ids, ascending.
    pub present: Vec<usize>,
    /// Ground-truth masks keyed by `(entity, slice)`.
    pub masks: BTreeMap<(usize, usize), Mask>,
    /// One abnormal finding sentence per present entity, in entity order.
    pub descriptions: Vec<String>,
    /// Report sentences in entity order.
    pub sentences: Vec<String>,
}

impl Sample {
    pub fn report(&self) -> String {
        self.sentences.join(" ")
    }

    /// The (slice, mask) planted for `entity`, if present.
    pub fn truth(&self, entity: usize) -> Option<(usize, &Mask)> {
        self.masks
            .range((entity, 0)..(entity + 1, 0))
            .next()
            .map(|(&(_, s), m)| (s, m))
    }
}

/// Sentences of a report with the given entity set, ordered by entity id.
pub fn report_sentences(registry: &Registry, present: &[usize]) -> Vec<String> {
    registry
        .entities
        .iter()
        .map(|e| {
            if present.contains(&e.entity_id) {
                e.abnormal_sentence()
            } else {
                e.normal_sentence()
            }
        })
        .collect()
}

fn background(rng: &mut ChaCha8Rng) -> Grid {
    let n = SLICE_SIZE;
    let mut g = Grid::from_fn(n, n, |_, _| rng.gen::<f64>());
    for _ in 0..2 {
        let src = g.clone();
        g = Grid::from_fn(n, n, |x, y| {
            let mut s = 0.0;
            let mut c = 0.0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (xx, yy) = (x as i64 + dx, y as i64 + dy);
                    if (0..n as i64).contains(&xx) && (0..n as i64).contains(&yy) {
                        s += src.get(xx as usize, yy as usize);
                        c += 1.0;
                    }
                }
            }
            s / c
        });
    }
    for v in &mut g.data {
        *v = quantize(*v * BACKGROUND_MAX);
    }
    g
}

fn shape_mask(family: ShapeFamily, cx: f64, cy: f64, rng: &mut ChaCha8Rng) -> Mask {
    let n = SLICE_SIZE;
    match family {
        ShapeFamily::Ellipse => {
            // minor semi-axis 3 keeps every ellipse wider than the seed pitch
            let a: f64 = [5.0, 6.0][rng.gen_range(0..2)];
            let b = 3.0;
            let (ax, ay) = if rng.gen::<bool>() { (a, b) } else { (b, a) };
            Mask::from_fn(n, n, |x, y| {
                let (dx, dy) = ((x as f64 - cx) / ax, (y as f64 - cy) / ay);
                dx * dx + dy * dy <= 1.0
            })
        }
        ShapeFamily::Rectangle => {
            let hx = rng.gen_range(2..=4) as f64;
            let hy = rng.gen_range(2..=4) as f64;
            Mask::from_fn(n, n, |x, y| {
                (x as f64 - cx).abs() <= hx && (y as f64 - cy).abs() <= hy
            })
        }
        ShapeFamily::Ring => {
            let outer: f64 = [4.5, 5.0][rng.gen_range(0..2)];
            Mask::from_fn(n, n, |x, y| {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let d = (dx * dx + dy * dy).sqrt();
                (2.0..=outer).contains(&d)
            })
        }
    }
}

pub fn generate_sample(registry: &Registry, layer_map: &LayerMap, sample_seed: u64) -> Sample {
    generate_sample_with(
        registry,
        layer_map,
        sample_seed,
        &GeneratorConfig::default(),
    )
}

/// Background texture plus one planted shape per sampled entity, drawn on a
/// slice inside that entity's layers.
pub fn generate_sample_with(
    registry: &Registry,
    layer_map: &LayerMap,
    sample_seed: u64,
    cfg: &GeneratorConfig,
) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut slices: Vec<Grid> = (0..NUM_SLICES).map(|_| background(&mut rng)).collect();

    let max = cfg.max_entities.min(NUM_ENTITIES);
    let p = if max == 0 {
        0.0
    } else {
        (cfg.mean_entities / max as f64).clamp(0.0, 1.0)
    };
    let k = (0..max).filter(|_| rng.gen::<f64>() < p).count();
    let mut ids: Vec<usize> = (0..NUM_ENTITIES).collect();
    ids.shuffle(&mut rng);
    let mut present: Vec<usize> = ids.into_iter().take(k).collect();
    present.sort_unstable();

    let mut masks = BTreeMap::new();
    for &e in &present {
        let spec = &registry.entities[e];
        let candidates = layer_map.slices(e);
        let slice = candidates[rng.gen_range(0..candidates.len())];
        let cx = spec.home.0 + rng.gen_range(-1i32..=1) as f64;
        let cy = spec.home.1 + rng.gen_range(-1i32..=1) as f64;
        let mask = shape_mask(spec.shape_family, cx, cy, &mut rng);
        let (lo, hi) = spec.intensity_band;
        let intensity = quantize(rng.gen_range(lo..=hi));
        for (i, &b) in mask.bits.iter().enumerate() {
            if b {
                slices[slice].data[i] = intensity;
            }
        }
        masks.insert((e, slice), mask);
    }

    let descriptions = present
        .iter()
        .map(|&e| registry.entities[e].abnormal_sentence())
        .collect();
    Sample {
        sample_id: format!("seed-{sample_seed}"),
        seed: sample_seed,
        slices,
        sentences: report_sentences(registry, &present),
        present,
        masks,
        descriptions,
    }
}
