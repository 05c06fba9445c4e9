use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::registry::{make_registry, LayerMap, Registry, NUM_SLICES};
use super::sample::{generate_sample, Sample};
use crate::clues::{read_gallery, write_gallery, FormatError, Gallery, TruthMask};
use crate::raster::Grid;
use crate::text::Vocab;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MASKS_FILE: &str = "masks.pcgl";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("mask container: {0}")]
    Format(#[from] FormatError),
    #[error("dataset needs at least 10 samples, got {0}")]
    TooSmall(usize),
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, val or test)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

/// 7:1:2 with floors on train and val; test takes the remainder.
pub fn split_counts(n: usize) -> SplitCounts {
    let train = n * 7 / 10;
    let val = n / 10;
    SplitCounts {
        train,
        val,
        test: n - train - val,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub sample_id: String,
    pub seed: u64,
    pub split: Split,
    /// Directory relative to the manifest.
    pub path: String,
    pub present: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub counts: SplitCounts,
    pub splits: BTreeMap<Split, Vec<String>>,
    pub vocab: BTreeMap<String, usize>,
    pub samples: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn vocab(&self) -> Result<Vocab, DataError> {
        let mut tokens = vec![String::new(); self.vocab.len()];
        for (t, &id) in &self.vocab {
            let slot = tokens
                .get_mut(id)
                .ok_or_else(|| DataError::Inconsistent(format!("vocab id {id} out of range")))?;
            *slot = t.clone();
        }
        if tokens.iter().any(String::is_empty) {
            return Err(DataError::Inconsistent("vocab ids are not dense".into()));
        }
        Ok(Vocab::from(tokens))
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.samples.iter().filter(move |s| s.split == split)
    }
}

/// Per-sample generator seeds derived from the dataset seed.
pub fn sample_seeds(n: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen()).collect()
}

/// Writes slices, text files, metadata and ground-truth masks for one sample.
pub fn write_sample(dir: &Path, sample: &Sample) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (i, g) in sample.slices.iter().enumerate() {
        let p = dir.join(format!("slice_{i:02}.pgm"));
        g.write_pgm(&p).map_err(io_err(&p))?;
    }
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_err(&p))
    };
    write("report.txt", lines(&sample.sentences))?;
    write("descriptions.txt", lines(&sample.descriptions))?;
    write(
        "sample.json",
        serde_json::to_string_pretty(&serde_json::json!({
            "sample_id": sample.sample_id,
            "seed": sample.seed,
            "present": sample.present,
        }))?,
    )?;
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
    let g = Gallery {
        sample_id: sample.sample_id.clone(),
        candidates: Vec::new(),
        truths,
    };
    write_gallery(&dir.join(MASKS_FILE), &g)?;
    Ok(())
}

fn lines(items: &[String]) -> String {
    items.iter().map(|s| format!("{s}\n")).collect()
}

fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    Ok(fs::read_to_string(path)
        .map_err(io_err(path))?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Deserialize)]
struct SampleMeta {
    sample_id: String,
    seed: u64,
    present: Vec<usize>,
}

pub fn load_sample(dir: &Path) -> Result<Sample, DataError> {
    let meta_path = dir.join("sample.json");
    let meta: SampleMeta =
        serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?;
    let mut slices = Vec::with_capacity(NUM_SLICES);
    for i in 0..NUM_SLICES {
        let p = dir.join(format!("slice_{i:02}.pgm"));
        slices.push(Grid::read_pgm(&p).map_err(io_err(&p))?);
    }
    let masks = read_gallery(&dir.join(MASKS_FILE))?
        .truths
        .into_iter()
        .map(|t| ((t.entity_id, t.slice_index), t.mask))
        .collect();
    Ok(Sample {
        sample_id: meta.sample_id,
        seed: meta.seed,
        slices,
        present: meta.present,
        masks,
        descriptions: read_lines(&dir.join("descriptions.txt"))?,
        sentences: read_lines(&dir.join("report.txt"))?,
    })
}

/// Generates `n` samples from registry `seed`, persists them under `out`
/// and writes the manifest.
pub fn generate_dataset(n: usize, seed: u64, out: &Path) -> Result<DatasetManifest, DataError> {
    if n < 10 {
        return Err(DataError::TooSmall(n));
    }
    let (registry, layer_map) = make_registry(seed);
    let counts = split_counts(n);
    let mut samples = Vec::with_capacity(n);
    let mut splits: BTreeMap<Split, Vec<String>> = BTreeMap::new();
    for (i, s) in sample_seeds(n, seed).into_iter().enumerate() {
        let split = if i < counts.train {
            Split::Train
        } else if i < counts.train + counts.val {
            Split::Val
        } else {
            Split::Test
        };
        let mut sample = generate_sample(&registry, &layer_map, s);
        sample.sample_id = format!("s{i:04}");
        let rel = format!("samples/{}", sample.sample_id);
        write_sample(&out.join(&rel), &sample)?;
        splits
            .entry(split)
            .or_default()
            .push(sample.sample_id.clone());
        samples.push(SampleEntry {
            sample_id: sample.sample_id,
            seed: s,
            split,
            path: rel,
            present: sample.present,
        });
    }
    let vocab = Vocab::from_registry(&registry);
    let manifest = DatasetManifest {
        seed,
        counts,
        splits,
        vocab: vocab
            .tokens()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect(),
        samples,
    };
    let mpath = out.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(io_err(&mpath))?;
    Ok(manifest)
}

/// A loaded corpus: manifest, registry and the on-disk root.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub registry: Registry,
    pub layer_map: LayerMap,
    pub vocab: Vocab,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self, DataError> {
        let mpath = root.join(MANIFEST_FILE);
        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(&mpath).map_err(io_err(&mpath))?)?;
        let (registry, layer_map) = make_registry(manifest.seed);
        let vocab = manifest.vocab()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            registry,
            layer_map,
            vocab,
        })
    }

    pub fn sample_dir(&self, entry: &SampleEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn entry(&self, sample_id: &str) -> Option<&SampleEntry> {
        self.manifest
            .samples
            .iter()
            .find(|s| s.sample_id == sample_id)
    }

    pub fn load(&self, sample_id: &str) -> Result<Sample, DataError> {
        let entry = self
            .entry(sample_id)
            .ok_or_else(|| DataError::Inconsistent(format!("no sample {sample_id:?}")))?;
        load_sample(&self.sample_dir(entry))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>, DataError> {
        self.manifest
            .entries(split)
            .map(|e| load_sample(&self.sample_dir(e)))
            .collect()
    }
}
