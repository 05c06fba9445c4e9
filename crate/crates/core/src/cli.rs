//! Command-line surface. `run` parses argv, executes one subcommand and
//! returns the process exit code.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::clinic::{generate_dataset, load_sample, DataError, Dataset, Sample, Split};
use crate::clues::{
    build_gallery, read_gallery, restrict_gallery, retrieve, write_gallery, FilterConfig,
    ProposalConfig,
};
use crate::gradsuite;
use crate::metrics::TokenizerMode;
use crate::model::{load_checkpoint, ModelError, ModelState, SamplingConfig};
use crate::raster::Grid;
use crate::trainer::{ablate, evaluate, fit, AblationRow, TrainConfig, TrainError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Overlay brightening factor for retrieved masks.
pub const OVERLAY_GAIN: f64 = 1.5;

#[derive(Debug, Parser)]
#[command(
    name = "pcrl",
    version,
    about = "Pathology-clue driven report generation on a synthetic scan corpus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a 7:1:2 split.
    GenData {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build one `<sample_id>.pcgl` segment-clue gallery per sample.
    BuildGallery {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        min_area: Option<usize>,
        #[arg(long)]
        min_stability: Option<f64>,
        #[arg(long)]
        dedup_iou: Option<f64>,
    },
    /// Retrieve the segment clue for one entity of one sample.
    Retrieve {
        /// Gallery file, or a directory holding `<sample_id>.pcgl`.
        #[arg(long)]
        gallery: PathBuf,
        /// Sample id in the dataset.
        #[arg(long)]
        sample: String,
        /// Entity name or numeric id.
        #[arg(long)]
        entity: String,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Overlay PGM path; defaults to the gallery's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train per a `key = value` config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Extra `key=value` overrides applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Generate a report for one sample.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Sample directory, or a sample id resolved against --data.
        #[arg(long)]
        sample: String,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Score generated reports on a split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "word")]
        tokenizer: TokenizerMode,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[command(flatten)]
        sampling: SamplingArgs,
        /// Also write the metrics JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation matrix and print the combined table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "baseline,a,b,c,d,full")]
        rows: Vec<AblationRow>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        test_limit: Option<usize>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run the finite-difference gradient suite.
    GradCheck {
        #[arg(long, default_value_t = gradsuite::SEEDS)]
        seeds: u64,
    },
}

#[derive(Debug, Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    #[arg(long, default_value_t = 0.9)]
    top_p: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 160)]
    max_len: usize,
    #[arg(long)]
    greedy: bool,
}

impl From<&SamplingArgs> for SamplingConfig {
    fn from(a: &SamplingArgs) -> Self {
        SamplingConfig {
            temperature: a.temperature,
            top_p: a.top_p,
            max_len: a.max_len,
            greedy: a.greedy,
            seed: a.seed,
        }
    }
}

/// A failed command, classified by exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(m: impl Display) -> Self {
        Self {
            code: EXIT_USAGE,
            message: m.to_string(),
        }
    }

    fn data(m: impl Display) -> Self {
        Self {
            code: EXIT_DATA,
            message: m.to_string(),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let code = if e.is_numeric() {
            EXIT_NUMERIC
        } else if matches!(e, TrainError::Config(_)) {
            EXIT_USAGE
        } else {
            EXIT_DATA
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

macro_rules! via_train_error {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                TrainError::from(e).into()
            }
        }
    )*};
}
via_train_error!(
    DataError,
    ModelError,
    crate::clues::FormatError,
    crate::clues::ClueError
);

fn write_out(out: &mut dyn Write, text: &str) -> Result<(), Failure> {
    out.write_all(text.as_bytes()).map_err(Failure::data)
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::data(format!("{}: {e}", path.display()))
}

/// Parses `argv` (program name first) and runs the command, writing results
/// to `out` and diagnostics to `err`.
pub fn run_with<I, S>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if code == EXIT_OK {
                write!(out, "{e}")
            } else {
                write!(err, "{e}")
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_with(argv, &mut std::io::stdout(), &mut std::io::stderr())
}

fn load_config(path: &Path, overrides: &[String]) -> Result<TrainConfig, Failure> {
    let mut cfg = TrainConfig::from_file(path)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("override {o:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn overlay(slice: &Grid, mask: &crate::raster::Mask) -> Grid {
    Grid::from_fn(slice.width, slice.height, |x, y| {
        let v = slice.get(x, y);
        if mask.get(x, y) {
            (v * OVERLAY_GAIN).min(1.0)
        } else {
            v
        }
    })
}

fn resolve_sample(spec: &str, data: &Path) -> Result<Sample, Failure> {
    let p = Path::new(spec);
    if p.is_dir() {
        Ok(load_sample(p)?)
    } else {
        Ok(Dataset::open(data)?.load(spec)?)
    }
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32, Failure> {
    match cmd {
        Command::GenData { n, seed, out: dir } => {
            let m = generate_dataset(n, seed, &dir)?;
            write_out(
                out,
                &format!(
                    "{}\n",
                    json!({"out": dir, "seed": seed, "counts": m.counts})
                ),
            )?;
        }
        Command::BuildGallery {
            data,
            out: dir,
            min_area,
            min_stability,
            dedup_iou,
        } => {
            let ds = Dataset::open(&data)?;
            let mut filter = FilterConfig::default();
            if let Some(v) = min_area {
                filter.min_area = v;
            }
            if let Some(v) = min_stability {
                filter.min_stability = v;
            }
            if let Some(v) = dedup_iou {
                filter.dedup_iou = v;
            }
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            let proposal = ProposalConfig::default();
            let (mut samples, mut candidates) = (0, 0);
            for entry in &ds.manifest.samples {
                let s = load_sample(&ds.sample_dir(entry))?;
                let g = build_gallery(&s, &proposal, &filter);
                write_gallery(&dir.join(format!("{}.pcgl", s.sample_id)), &g)?;
                samples += 1;
                candidates += g.candidates.len();
            }
            write_out(
                out,
                &format!(
                    "{}\n",
                    json!({"out": dir, "samples": samples, "candidates": candidates})
                ),
            )?;
        }
        Command::Retrieve {
            gallery,
            sample,
            entity,
            data,
            out: overlay_path,
        } => {
            let ds = Dataset::open(&data)?;
            let s = ds.load(&sample)?;
            let gpath = if gallery.is_dir() {
                gallery.join(format!("{sample}.pcgl"))
            } else {
                gallery.clone()
            };
            let g = read_gallery(&gpath)?;
            if g.sample_id != s.sample_id {
                return Err(Failure::data(format!(
                    "gallery {} belongs to {}",
                    gpath.display(),
                    g.sample_id
                )));
            }
            let spec = entity
                .parse::<usize>()
                .ok()
                .and_then(|id| ds.registry.entity(id))
                .or_else(|| ds.registry.by_name(&entity))
                .ok_or_else(|| Failure::usage(format!("unknown entity {entity:?}")))?;
            let e = spec.entity_id;
            let description = s
                .present
                .iter()
                .position(|&p| p == e)
                .map(|i| s.descriptions[i].clone())
                .unwrap_or_else(|| spec.abnormal_sentence());
            let gd = restrict_gallery(&g, e, &ds.layer_map);
            let r = retrieve(&gd, &description, &ds.registry)?;
            let c = &r.candidate;
            let path = overlay_path.unwrap_or_else(|| {
                gpath
                    .parent()
                    .unwrap_or(Path::new("."))
                    .join(format!("overlay_{}_{}.pgm", s.sample_id, spec.name))
            });
            overlay(&s.slices[c.slice_index], &c.mask)
                .write_pgm(&path)
                .map_err(io(&path))?;
            let truth_iou = s.truth(e).map(|(slice, m)| {
                if slice == c.slice_index {
                    m.iou(&c.mask)
                } else {
                    0.0
                }
            });
            let doc = json!({
                "sample_id": s.sample_id,
                "entity_id": r.entity_id,
                "entity": spec.name,
                "description": description,
                "score": r.score,
                "searched": r.searched,
                "candidate": {
                    "slice_index": c.slice_index,
                    "area": c.area,
                    "stability": c.stability,
                    "mean_intensity": c.mean_intensity,
                    "centroid": c.mask.centroid(),
                    "runs": c.mask.to_runs(),
                },
                "truth_iou": truth_iou,
                "overlay": path,
            });
            write_out(out, &format!("{doc}\n"))?;
        }
        Command::Train { config, overrides } => {
            let cfg = load_config(&config, &overrides)?;
            let outcome = fit(&cfg)?;
            write_out(
                out,
                &format!(
                    "{}\n",
                    serde_json::to_string(&outcome).map_err(Failure::data)?
                ),
            )?;
        }
        Command::Generate {
            checkpoint,
            sample,
            data,
            sampling,
        } => {
            let sc = SamplingConfig::from(&sampling);
            sc.validate().map_err(Failure::usage)?;
            let s = resolve_sample(&sample, &data)?;
            let model: ModelState<f32> = load_checkpoint(&checkpoint)?;
            let report = model.generate_report(&s.slices, &sc)?;
            write_out(out, &format!("{report}\n"))?;
        }
        Command::Evaluate {
            checkpoint,
            split,
            tokenizer,
            data,
            limit,
            sampling,
            out: json_path,
        } => {
            let sc = SamplingConfig::from(&sampling);
            sc.validate().map_err(Failure::usage)?;
            let (m, _) = evaluate(&checkpoint, &data, split, tokenizer, &sc, limit)?;
            let doc = serde_json::to_string_pretty(&m).map_err(Failure::data)?;
            if let Some(p) = json_path {
                fs::write(&p, &doc).map_err(io(&p))?;
            }
            write_out(
                out,
                &format!(
                    "{}\n{}\n{doc}\n",
                    crate::metrics::MetricsReport::table_header(),
                    m.table_row()
                ),
            )?;
        }
        Command::Ablate {
            config,
            rows,
            seeds,
            test_limit,
            overrides,
        } => {
            let cfg = load_config(&config, &overrides)?;
            let table = ablate(&cfg, &rows, &seeds, test_limit)?;
            let path = cfg.checkpoint_dir.join("ablation.json");
            fs::write(
                &path,
                serde_json::to_string_pretty(&table).map_err(Failure::data)?,
            )
            .map_err(io(&path))?;
            write_out(out, &table.render())?;
        }
        Command::GradCheck { seeds } => {
            let results = gradsuite::run(seeds);
            let mut failed = 0;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                failed += usize::from(!r.passed());
                let detail = r.error.as_deref().unwrap_or("");
                write_out(
                    out,
                    &format!(
                        "{status:<4} {:<28} seed {:>2}  max rel err {:.3e}  {detail}\n",
                        r.name, r.seed, r.max_relative_error
                    ),
                )?;
            }
            write_out(
                out,
                &format!(
                    "{} checks, {failed} failed (tolerance {:e})\n",
                    results.len(),
                    gradsuite::TOLERANCE
                ),
            )?;
            return Ok(if failed == 0 { EXIT_OK } else { EXIT_NUMERIC });
        }
    }
    Ok(EXIT_OK)
}
