//! Synthetic multi-slice scan corpus with planted pathology regions.

mod dataset;
mod registry;
mod sample;

pub use dataset::{
    generate_dataset, load_sample, sample_seeds, split_counts, write_sample, DataError, Dataset,
    DatasetManifest, SampleEntry, Split, SplitCounts,
};
pub use registry::{
    make_registry, EntitySpec, LayerMap, Registry, ShapeFamily, ENTITY_NAMES, HOMES, NAME_SLOT,
    NORMAL_TEMPLATE, NUM_ENTITIES, NUM_LAYERS, NUM_SLICES, SLICES_PER_LAYER, SLICE_SIZE,
};
pub use sample::{
    generate_sample, generate_sample_with, report_sentences, GeneratorConfig, Sample,
    BACKGROUND_MAX,
};

#[cfg(test)]
mod tests;
