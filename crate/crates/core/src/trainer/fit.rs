use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::optim::AdamW;
use super::step::{train_step, BagOfWords, BatchItem, StepContext};
use super::{Precision, TrainConfig, TrainError};
use crate::clinic::{Dataset, Sample, Split};
use crate::clues::{build_gallery, read_gallery, FilterConfig, Gallery, ProposalConfig};
use crate::losses::LossBreakdown;
use crate::metrics::{score_corpus, MetricsReport, SubwordModel, Tokenizer, TokenizerMode};
use crate::model::{
    load_checkpoint, save_checkpoint, InstructionSet, ModelError, ModelState, SamplingConfig,
};
use crate::tensor::Real;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.pcrl";
pub const LAST_CHECKPOINT: &str = "last.pcrl";
/// Consecutive non-finite steps tolerated before training aborts.
pub const NON_FINITE_LIMIT: usize = 10;
pub const SUBWORD_MERGES: usize = 40;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Galleries for `samples`, read from `<dir>/<sample_id>.pcgl` or built in
/// memory with default settings when `dir` is `None`.
pub fn load_galleries(samples: &[Sample], dir: Option<&Path>) -> Result<Vec<Gallery>, TrainError> {
    samples
        .iter()
        .map(|s| match dir {
            Some(d) => {
                let p = d.join(format!("{}.pcgl", s.sample_id));
                if !p.exists() {
                    return Err(TrainError::GalleryMissing(s.sample_id.clone()));
                }
                let g = read_gallery(&p)?;
                if g.sample_id != s.sample_id {
                    return Err(TrainError::GalleryMissing(s.sample_id.clone()));
                }
                Ok(g)
            }
            None => Ok(build_gallery(
                s,
                &ProposalConfig::default(),
                &FilterConfig::default(),
            )),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub steps: usize,
    pub best_cider: Option<f64>,
    pub best_epoch: Option<usize>,
    pub last_breakdown: Option<LossBreakdown>,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
    pub log: PathBuf,
}

struct Log(BufWriter<File>, PathBuf);

impl Log {
    fn line(&mut self, v: serde_json::Value) -> Result<(), TrainError> {
        writeln!(self.0, "{v}").map_err(io_err(&self.1))?;
        self.0.flush().map_err(io_err(&self.1))
    }
}

/// Generates a report per sample (sampling seed offset by position) and
/// scores them against the references.
pub fn evaluate_samples<T: Real>(
    model: &ModelState<T>,
    samples: &[Sample],
    keywords: &[String],
    tokenizer: &Tokenizer,
    sampling: &SamplingConfig,
) -> Result<(MetricsReport, Vec<String>), TrainError> {
    let mut cands = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let sc = SamplingConfig {
            seed: sampling.seed.wrapping_add(i as u64),
            ..*sampling
        };
        cands.push(model.generate_report(&s.slices, &sc)?);
    }
    let refs: Vec<String> = samples.iter().map(Sample::report).collect();
    Ok((score_corpus(&cands, &refs, keywords, tokenizer)?, cands))
}

/// Trains per `cfg`, validating on the val split and keeping the checkpoint
/// with the best val CIDEr-D.
pub fn fit(cfg: &TrainConfig) -> Result<FitOutcome, TrainError> {
    match cfg.precision {
        Precision::F32 => fit_typed::<f32>(cfg),
        Precision::F64 => fit_typed::<f64>(cfg),
    }
}

fn fit_typed<T: Real>(cfg: &TrainConfig) -> Result<FitOutcome, TrainError> {
    cfg.validate()?;
    let ds = Dataset::open(&cfg.data_dir)?;
    let mut train = ds.load_split(Split::Train)?;
    if let Some(n) = cfg.train_limit {
        train.truncate(n);
    }
    if train.is_empty() {
        return Err(TrainError::Config("empty train split".into()));
    }
    let mut val = if cfg.eval_every > 0 {
        ds.load_split(Split::Val)?
    } else {
        Vec::new()
    };
    if let Some(n) = cfg.eval_limit {
        val.truncate(n);
    }
    let galleries = if cfg.sca || cfg.gallery_dir.is_some() {
        load_galleries(&train, cfg.gallery_dir.as_deref())?
    } else {
        train
            .iter()
            .map(|s| Gallery {
                sample_id: s.sample_id.clone(),
                ..Gallery::default()
            })
            .collect()
    };

    let mc = cfg.model_config(ds.vocab.len())?;
    let instructions = InstructionSet::new(&ds.vocab).map_err(ModelError::from)?;
    let mut model = ModelState::<T>::init(mc, ds.vocab.clone(), instructions)?;
    let bow = cfg
        .frozen_text
        .then(|| BagOfWords::new(model.config.vocab_size, model.config.d_w));
    let keywords = ds.registry.keywords();

    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let best_path = dir.join(BEST_CHECKPOINT);
    let last_path = dir.join(LAST_CHECKPOINT);
    let log_path = dir.join(LOG_FILE);
    let mut log = Log(
        BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?),
        log_path.clone(),
    );
    log.line(json!({
        "event": "start",
        "parameters": model.parameter_count(),
        "train": train.len(),
        "val": val.len(),
        "precision": T::NAME,
        "sca": cfg.sca,
        "eca": cfg.eca,
        "tca": cfg.tca,
        "frozen_text": cfg.frozen_text,
    }))?;
    save_checkpoint(&model, &best_path)?;

    let ctx = StepContext {
        registry: &ds.registry,
        layer_map: &ds.layer_map,
        config: cfg,
        bow: bow.as_ref(),
    };
    let mut opt = AdamW::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut outcome = FitOutcome {
        steps: 0,
        best_cider: None,
        best_epoch: None,
        last_breakdown: None,
        best_checkpoint: best_path.clone(),
        last_checkpoint: last_path.clone(),
        log: log_path,
    };
    let mut streak = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let steps = cfg.max_steps_per_epoch.unwrap_or(usize::MAX);
        for chunk in order.chunks(cfg.batch_size).take(steps) {
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .map(|&i| BatchItem {
                    sample: &train[i],
                    gallery: &galleries[i],
                })
                .collect();
            match train_step(&mut model, &mut opt, &batch, &ctx) {
                Ok(bd) => {
                    streak = 0;
                    outcome.steps += 1;
                    let mut line = serde_json::to_value(&bd).expect("breakdown serializes");
                    line["event"] = json!("step");
                    line["epoch"] = json!(epoch);
                    log.line(line)?;
                    outcome.last_breakdown = Some(bd);
                }
                Err(e) if e.is_numeric() => {
                    streak += 1;
                    log.line(
                        json!({"event": "non_finite", "epoch": epoch, "error": e.to_string()}),
                    )?;
                    if streak > NON_FINITE_LIMIT {
                        save_checkpoint(&model, &last_path)?;
                        return Err(TrainError::Diverged(streak));
                    }
                }
                Err(e) => return Err(e),
            }
        }
        let validate = cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0;
        if validate && val.len() >= 2 {
            let (m, _) =
                evaluate_samples(&model, &val, &keywords, &Tokenizer::Word, &cfg.sampling)?;
            log.line(json!({"event": "val", "epoch": epoch, "metrics": m}))?;
            if outcome.best_cider.is_none_or(|b| m.cider_d > b) {
                outcome.best_cider = Some(m.cider_d);
                outcome.best_epoch = Some(epoch);
                save_checkpoint(&model, &best_path)?;
            }
        } else if outcome.best_cider.is_none() {
            if validate {
                log.line(json!({"event": "val_skipped", "epoch": epoch, "val": val.len()}))?;
            }
            save_checkpoint(&model, &best_path)?;
        }
    }
    save_checkpoint(&model, &last_path)?;
    log.line(json!({"event": "end", "steps": outcome.steps, "best_epoch": outcome.best_epoch}))?;
    Ok(outcome)
}

/// Reads the reference reports of a split without loading images.
fn split_reports(ds: &Dataset, split: Split) -> Result<Vec<String>, TrainError> {
    ds.manifest
        .entries(split)
        .map(|e| {
            let p = ds.sample_dir(e).join("report.txt");
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            Ok(text
                .lines()
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" "))
        })
        .collect()
}

pub fn tokenizer_for(ds: &Dataset, mode: TokenizerMode) -> Result<Tokenizer, TrainError> {
    Ok(match mode {
        TokenizerMode::Word => Tokenizer::Word,
        TokenizerMode::Subword => Tokenizer::Subword(SubwordModel::learn(
            &split_reports(ds, Split::Train)?,
            SUBWORD_MERGES,
        )),
    })
}

/// Loads a checkpoint, generates reports for `split` and scores them.
pub fn evaluate(
    checkpoint: &Path,
    data_dir: &Path,
    split: Split,
    mode: TokenizerMode,
    sampling: &SamplingConfig,
    limit: Option<usize>,
) -> Result<(MetricsReport, Vec<String>), TrainError> {
    let ds = Dataset::open(data_dir)?;
    let model: ModelState<f32> = load_checkpoint(checkpoint)?;
    if model.vocab != ds.vocab {
        return Err(ModelError::ConfigMismatch(
            "checkpoint vocabulary differs from the dataset's".into(),
        )
        .into());
    }
    let mut samples = ds.load_split(split)?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    let tokenizer = tokenizer_for(&ds, mode)?;
    evaluate_samples(
        &model,
        &samples,
        &ds.registry.keywords(),
        &tokenizer,
        sampling,
    )
}

/// Rows of the ablation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationRow {
    Baseline,
    A,
    B,
    C,
    D,
    E,
    Full,
}

impl AblationRow {
    pub const ALL: [AblationRow; 7] = [
        Self::Baseline,
        Self::A,
        Self::B,
        Self::C,
        Self::D,
        Self::E,
        Self::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
            Self::E => "e",
            Self::Full => "full",
        }
    }

    /// `(sca, eca, tca, frozen_text)`.
    pub fn toggles(self) -> (bool, bool, bool, bool) {
        match self {
            Self::Baseline => (false, false, false, false),
            Self::A => (true, false, false, false),
            Self::B => (false, true, false, false),
            Self::C => (true, true, false, false),
            Self::D => (false, true, true, false),
            Self::E => (true, true, true, true),
            Self::Full => (true, true, true, false),
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        (cfg.sca, cfg.eca, cfg.tca, cfg.frozen_text) = self.toggles();
    }
}

impl FromStr for AblationRow {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| {
                format!("unknown ablation row {s:?} (expected baseline, a, b, c, d, e or full)")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: AblationRow,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<MetricsReport>,
    pub mean: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationResult>,
}

impl AblationTable {
    pub fn get(&self, row: AblationRow) -> Option<&AblationResult> {
        self.rows.iter().find(|r| r.row == row)
    }

    /// Fixed-order metric table scaled by 100, one line per row.
    pub fn render(&self) -> String {
        let mut out = format!("{:<9} {}\n", "row", MetricsReport::table_header());
        for r in &self.rows {
            out.push_str(&format!("{:<9} {}\n", r.row.name(), r.mean.table_row()));
        }
        out
    }
}

/// Trains every row under every seed (checkpoints under
/// `<checkpoint_dir>/<row>/seed<k>`) and scores the best checkpoint of each
/// run on the test split.
pub fn ablate(
    base: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    test_limit: Option<usize>,
) -> Result<AblationTable, TrainError> {
    if seeds.is_empty() || rows.is_empty() {
        return Err(TrainError::Config(
            "ablation needs at least one row and one seed".into(),
        ));
    }
    let ds = Dataset::open(&base.data_dir)?;
    let mut test = ds.load_split(Split::Test)?;
    if let Some(n) = test_limit {
        test.truncate(n);
    }
    let keywords = ds.registry.keywords();
    let mut table = AblationTable { rows: Vec::new() };
    for &row in rows {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let mut cfg = base.clone();
            row.apply(&mut cfg);
            cfg.seed = seed;
            cfg.checkpoint_dir = base
                .checkpoint_dir
                .join(row.name())
                .join(format!("seed{seed}"));
            let out = fit(&cfg)?;
            let model: ModelState<f32> = load_checkpoint(&out.best_checkpoint)?;
            let (m, _) =
                evaluate_samples(&model, &test, &keywords, &Tokenizer::Word, &cfg.sampling)?;
            per_seed.push(m);
        }
        table.rows.push(AblationResult {
            row,
            seeds: seeds.to_vec(),
            mean: MetricsReport::mean(&per_seed),
            per_seed,
        });
    }
    Ok(table)
}
