//! Segmentation-clue galleries: grid-seeded region proposals, rule-based
//! filtering, layer-restricted lookup and descriptor-cosine retrieval.

mod format;

use std::cmp::Ordering;
use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

use crate::clinic::{LayerMap, Registry, Sample, NUM_LAYERS};
use crate::raster::{Grid, Mask};

pub use format::{decode_gallery, encode_gallery, read_gallery, write_gallery, FormatError};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ClueError {
    #[error("both threshold-perturbed regions are empty")]
    EmptyPerturbation,
    #[error("no segment clue for entity {0}")]
    EmptyGallery(usize),
    #[error("description does not name exactly one registered entity: {0:?}")]
    NoEntity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProposalConfig {
    /// Seed lattice is `grid_n x grid_n`.
    pub grid_n: usize,
    /// A seed fires only if its pixel is at least this bright.
    pub activation: f64,
    /// Region-growing threshold.
    pub region: f64,
    /// Threshold perturbation for the stability score.
    pub delta: f64,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            grid_n: 8,
            activation: 0.45,
            region: 0.45,
            delta: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FilterConfig {
    pub min_area: usize,
    pub max_area_frac: f64,
    pub min_stability: f64,
    pub dedup_iou: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_area: 8,
            max_area_frac: 0.5,
            min_stability: 0.9,
            dedup_iou: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskCandidate {
    pub slice_index: usize,
    pub mask: Mask,
    pub area: usize,
    pub stability: f64,
    pub mean_intensity: f64,
}

impl MaskCandidate {
    pub fn new(slice_index: usize, mask: Mask, stability: f64, grid: &Grid) -> Self {
        Self {
            slice_index,
            area: mask.area(),
            mean_intensity: mask.mean_of(grid),
            mask,
            stability,
        }
    }

    fn centroid_or_origin(&self) -> (f64, f64) {
        self.mask.centroid().unwrap_or((0.0, 0.0))
    }
}

/// A ground-truth mask carried in the same container as the proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthMask {
    pub entity_id: usize,
    pub slice_index: usize,
    pub mask: Mask,
    pub mean_intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gallery {
    pub sample_id: String,
    /// Filtered proposals ordered by slice.
    pub candidates: Vec<MaskCandidate>,
    pub truths: Vec<TruthMask>,
}

impl Gallery {
    pub fn on_slice(&self, slice: usize) -> impl Iterator<Item = &MaskCandidate> {
        self.candidates
            .iter()
            .filter(move |c| c.slice_index == slice)
    }
}

/// 4-connected component of pixels `>= threshold` containing `seed`.
pub fn flood_fill(slice: &Grid, seed: (usize, usize), threshold: f64) -> Mask {
    let mut mask = Mask::empty(slice.width, slice.height);
    if slice.get(seed.0, seed.1) < threshold {
        return mask;
    }
    let mut queue = VecDeque::from([seed]);
    mask.set(seed.0, seed.1, true);
    while let Some((x, y)) = queue.pop_front() {
        let mut visit = |nx: usize, ny: usize| {
            if !mask.get(nx, ny) && slice.get(nx, ny) >= threshold {
                mask.set(nx, ny, true);
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < slice.width {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < slice.height {
            visit(x, y + 1);
        }
    }
    mask
}

/// Lattice points at cell centres of an `n x n` partition of the slice.
pub fn seed_lattice(width: usize, height: usize, n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let x = ((2 * i + 1) * width) / (2 * n);
            let y = ((2 * j + 1) * height) / (2 * n);
            out.push((x.min(width - 1), y.min(height - 1)));
        }
    }
    out
}

/// IoU of the regions grown from `seed` at `region ± delta`.
pub fn stability_score(
    slice: &Grid,
    seed: (usize, usize),
    cfg: &ProposalConfig,
) -> Result<f64, ClueError> {
    let hi = flood_fill(slice, seed, cfg.region + cfg.delta);
    let lo = flood_fill(slice, seed, cfg.region - cfg.delta);
    if hi.is_empty() && lo.is_empty() {
        return Err(ClueError::EmptyPerturbation);
    }
    Ok(hi.iou(&lo))
}

/// One candidate per active seed; duplicates across seeds are kept.
pub fn propose_masks(slice: &Grid, slice_index: usize, cfg: &ProposalConfig) -> Vec<MaskCandidate> {
    assert!(cfg.grid_n >= 2, "seed lattice must be at least 2x2");
    seed_lattice(slice.width, slice.height, cfg.grid_n)
        .into_iter()
        .filter(|&(x, y)| slice.get(x, y) >= cfg.activation)
        .filter_map(|seed| {
            let mask = flood_fill(slice, seed, cfg.region);
            if mask.is_empty() {
                return None;
            }
            let stability = stability_score(slice, seed, cfg).unwrap_or(0.0);
            Some(MaskCandidate::new(slice_index, mask, stability, slice))
        })
        .collect()
}

/// Priority used to pick a survivor among near-duplicates.
fn priority(a: &MaskCandidate, b: &MaskCandidate) -> Ordering {
    let (ax, ay) = a.centroid_or_origin();
    let (bx, by) = b.centroid_or_origin();
    b.stability
        .total_cmp(&a.stability)
        .then(b.area.cmp(&a.area))
        .then(a.slice_index.cmp(&b.slice_index))
        .then(ay.total_cmp(&by))
        .then(ax.total_cmp(&bx))
        .then_with(|| a.mask.bits.cmp(&b.mask.bits))
}

fn output_order(a: &MaskCandidate, b: &MaskCandidate) -> Ordering {
    let (ax, ay) = a.centroid_or_origin();
    let (bx, by) = b.centroid_or_origin();
    a.slice_index
        .cmp(&b.slice_index)
        .then(ay.total_cmp(&by))
        .then(ax.total_cmp(&bx))
        .then_with(|| a.mask.bits.cmp(&b.mask.bits))
}

pub fn filter_masks(candidates: &[MaskCandidate], cfg: &FilterConfig) -> Vec<MaskCandidate> {
    let mut pool: Vec<&MaskCandidate> = candidates
        .iter()
        .filter(|c| {
            let cap = cfg.max_area_frac * (c.mask.width * c.mask.height) as f64;
            c.area >= cfg.min_area && (c.area as f64) <= cap && c.stability >= cfg.min_stability
        })
        .collect();
    pool.sort_by(|a, b| priority(a, b));
    let mut kept: Vec<MaskCandidate> = Vec::new();
    for c in pool {
        let dup = kept
            .iter()
            .any(|k| k.slice_index == c.slice_index && k.mask.iou(&c.mask) > cfg.dedup_iou);
        if !dup {
            kept.push(c.clone());
        }
    }
    kept.sort_by(output_order);
    kept
}

pub fn build_gallery(sample: &Sample, proposal: &ProposalConfig, filter: &FilterConfig) -> Gallery {
    let mut candidates = Vec::new();
    for (s, slice) in sample.slices.iter().enumerate() {
        candidates.extend(filter_masks(&propose_masks(slice, s, proposal), filter));
    }
    let truths = sample
        .masks
        .iter()
        .map(|(&(entity_id, slice_index), mask)| TruthMask {
            entity_id,
            slice_index,
            mean_intensity: mask.mean_of(&sample.slices[slice_index]),
            mask: mask.clone(),
        })
        .collect();
    Gallery {
        sample_id: sample.sample_id.clone(),
        candidates,
        truths,
    }
}

/// Candidates lying on slices of the entity's layers.
pub fn restrict_gallery<'g>(
    gallery: &'g Gallery,
    entity: usize,
    layer_map: &LayerMap,
) -> Vec<&'g MaskCandidate> {
    gallery
        .candidates
        .iter()
        .filter(|c| layer_map.slice_in_entity_layers(entity, c.slice_index))
        .collect()
}

/// Unit-norm 6-component shape/intensity descriptor:
/// `(cx/W, cy/H, sqrt(area)/W, mean intensity, layer/8, eccentricity)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QueryEmbedding(pub [f64; 6]);

impl QueryEmbedding {
    pub fn from_raw(raw: [f64; 6]) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut v = raw;
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Self(v)
    }

    pub fn of_candidate(c: &MaskCandidate) -> Self {
        let (w, h) = (c.mask.width as f64, c.mask.height as f64);
        let (cx, cy) = c.centroid_or_origin();
        Self::from_raw([
            cx / w,
            cy / h,
            (c.area as f64).sqrt() / w,
            c.mean_intensity,
            LayerMap::layer_of_slice(c.slice_index) as f64 / NUM_LAYERS as f64,
            c.mask.eccentricity(),
        ])
    }

    /// Text side: the registry prior of the entity named in a description.
    pub fn of_entity(registry: &Registry, entity: usize, width: usize, height: usize) -> Self {
        let e = &registry.entities[entity];
        let (w, h) = (width as f64, height as f64);
        Self::from_raw([
            e.home.0 / w,
            e.home.1 / h,
            e.shape_family.expected_sqrt_area() / w,
            e.band_mid(),
            e.mean_layer() / NUM_LAYERS as f64,
            e.shape_family.expected_eccentricity(),
        ])
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub entity_id: usize,
    pub candidate: MaskCandidate,
    pub score: f64,
    pub searched: usize,
}

/// Cosine-argmax over the restricted gallery; ties go to the lower slice.
pub fn retrieve(
    gallery_d: &[&MaskCandidate],
    description: &str,
    registry: &Registry,
) -> Result<RetrievalResult, ClueError> {
    let entity = registry
        .entity_in(description)
        .ok_or_else(|| ClueError::NoEntity(description.to_string()))?
        .entity_id;
    let first = gallery_d.first().ok_or(ClueError::EmptyGallery(entity))?;
    let query = QueryEmbedding::of_entity(registry, entity, first.mask.width, first.mask.height);
    let mut best: Option<(f64, &MaskCandidate)> = None;
    for &c in gallery_d {
        let s = QueryEmbedding::of_candidate(c).cosine(&query);
        let better = match best {
            None => true,
            Some((bs, bc)) => s > bs || (s == bs && c.slice_index < bc.slice_index),
        };
        if better {
            best = Some((s, c));
        }
    }
    let (score, cand) = best.expect("nonempty gallery");
    Ok(RetrievalResult {
        entity_id: entity,
        candidate: cand.clone(),
        score,
        searched: gallery_d.len(),
    })
}

#[cfg(test)]
mod tests;

/// Outcome of a batch of retrieval queries against generated samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RetrievalStats {
    pub queries: usize,
    pub hits: usize,
    pub layer_violations: usize,
    /// Queries whose restricted gallery was empty.
    pub empty: usize,
}

impl RetrievalStats {
    pub fn hit_rate(&self) -> f64 {
        self.hits as f64 / self.queries.max(1) as f64
    }
}

/// Issues one query per planted entity over consecutive sample seeds until
/// `queries` have been made. A hit is a top-1 mask on the planted slice with
/// IoU >= `min_iou` against the ground truth.
pub fn retrieval_benchmark(
    registry_seed: u64,
    first_seed: u64,
    queries: usize,
    min_iou: f64,
) -> RetrievalStats {
    let (registry, layer_map) = crate::clinic::make_registry(registry_seed);
    let (proposal, filter) = (ProposalConfig::default(), FilterConfig::default());
    let mut stats = RetrievalStats {
        queries: 0,
        hits: 0,
        layer_violations: 0,
        empty: 0,
    };
    let mut seed = first_seed;
    while stats.queries < queries {
        let sample = crate::clinic::generate_sample(&registry, &layer_map, seed);
        seed += 1;
        let gallery = build_gallery(&sample, &proposal, &filter);
        for (d, &entity) in sample.descriptions.iter().zip(&sample.present) {
            if stats.queries == queries {
                break;
            }
            stats.queries += 1;
            let restricted = restrict_gallery(&gallery, entity, &layer_map);
            let Ok(hit) = retrieve(&restricted, d, &registry) else {
                stats.empty += 1;
                continue;
            };
            if !layer_map.slice_in_entity_layers(entity, hit.candidate.slice_index) {
                stats.layer_violations += 1;
            }
            if let Some((slice, truth)) = sample.truth(entity) {
                if slice == hit.candidate.slice_index && hit.candidate.mask.iou(truth) >= min_iou {
                    stats.hits += 1;
                }
            }
        }
    }
    stats
}
