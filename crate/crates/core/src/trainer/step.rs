use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::optim::{clip_global_norm, AdamW};
use super::{TrainConfig, TrainError};
use crate::clinic::{LayerMap, Registry, Sample, SLICE_SIZE};
use crate::clues::{restrict_gallery, retrieve, Gallery};
use crate::losses::{dice_loss, gen_loss, info_nce, resize_mask, total_loss, LossBreakdown};
use crate::model::{ModelState, Params};
use crate::raster::Mask;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};
use crate::text::Vocab;

const BOW_SEED: u64 = 0xb0_5eed;

/// Fixed text encoder for the frozen-text ablation: mean of seeded random
/// token vectors. Never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct BagOfWords {
    dim: usize,
    table: Vec<f64>,
}

impl BagOfWords {
    pub fn new(vocab_size: usize, dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(BOW_SEED);
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        Self {
            dim,
            table: (0..vocab_size * dim).map(|_| n.sample(&mut rng)).collect(),
        }
    }

    pub fn encode(&self, ids: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &id in ids {
            for (o, t) in out
                .iter_mut()
                .zip(&self.table[id * self.dim..(id + 1) * self.dim])
            {
                *o += t;
            }
        }
        let n = ids.len().max(1) as f64;
        out.iter_mut().for_each(|o| *o /= n);
        out
    }
}

/// One batch element: a sample and its prebuilt gallery.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub sample: &'a Sample,
    pub gallery: &'a Gallery,
}

/// Everything a step needs besides the model and the batch.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub registry: &'a Registry,
    pub layer_map: &'a LayerMap,
    pub config: &'a TrainConfig,
    pub bow: Option<&'a BagOfWords>,
}

fn stack<T: Real>(tape: &mut Tape<T>, rows: &[Var]) -> Result<Var, TensorError> {
    let parts = rows
        .iter()
        .map(|&r| {
            let d = tape.shape(r).iter().product();
            tape.reshape(r, &[1, d])
        })
        .collect::<Result<Vec<_>, _>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        tape.concat(&parts, 0)
    }
}

fn encode_report(vocab: &Vocab, sample: &Sample) -> Result<Vec<usize>, TrainError> {
    Ok(vocab.encode(&sample.report())?)
}

/// Retrieved segment clue per present entity, resized to the prediction
/// grid; `None` where the restricted gallery was empty.
pub fn retrieved_targets(
    sample: &Sample,
    gallery: &Gallery,
    registry: &Registry,
    layer_map: &LayerMap,
) -> Result<Vec<Option<Mask>>, TrainError> {
    if gallery.sample_id != sample.sample_id {
        return Err(TrainError::GalleryMissing(sample.sample_id.clone()));
    }
    sample
        .present
        .iter()
        .zip(&sample.descriptions)
        .map(|(&e, desc)| {
            let gd = restrict_gallery(gallery, e, layer_map);
            if gd.is_empty() {
                return Ok(None);
            }
            let r = retrieve(&gd, desc, registry)?;
            Ok(Some(resize_mask(
                &r.candidate.mask,
                SLICE_SIZE,
                SLICE_SIZE,
            )?))
        })
        .collect()
}

/// Text-side representation rows `[K, d_w]` for `texts`, through the shared
/// decoder or the frozen encoder.
fn text_rows<T: Real>(
    p: &Params<'_, T>,
    tape: &mut Tape<T>,
    texts: &[Vec<usize>],
    bow: Option<&BagOfWords>,
) -> Result<Var, TrainError> {
    match bow {
        Some(b) => {
            let d = p.config().d_w;
            let data: Vec<f64> = texts.iter().flat_map(|t| b.encode(t)).collect();
            Ok(tape.constant(Tensor::<T>::from_f64(vec![texts.len(), d], &data)?))
        }
        None => {
            let instr = &p.state.instructions.representation;
            let reps = texts
                .iter()
                .map(|t| p.represent_text(tape, instr, t))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(stack(tape, &reps)?)
        }
    }
}

fn mean_of<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Option<Var>, TensorError> {
    if terms.is_empty() {
        return Ok(None);
    }
    let s = stack(tape, terms)?;
    tape.mean_all(s).map(Some)
}

/// Records the joint objective for `batch` on `tape`. Each term is averaged
/// over the samples where it is defined; disabled or undefined terms are 0
/// and listed in `skipped`.
pub fn batch_loss<T: Real>(
    p: &Params<'_, T>,
    tape: &mut Tape<T>,
    batch: &[BatchItem<'_>],
    ctx: &StepContext<'_>,
) -> Result<(Var, LossBreakdown), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Shape("empty batch".into()));
    }
    let cfg = ctx.config;
    let state = p.state;
    let vocab = &state.vocab;
    let eos = vocab.eos();
    let mut bd = LossBreakdown {
        n_b: batch.len(),
        ..LossBreakdown::default()
    };
    let (mut gens, mut segs, mut ecas) = (Vec::new(), Vec::new(), Vec::new());
    let (mut theme_v, mut theme_text) = (Vec::new(), Vec::new());

    for item in batch {
        let s = item.sample;
        let v = p.encode_images(tape, &s.slices)?;
        let h = p.project(tape, v)?;
        let report = encode_report(vocab, s)?;
        if report.len() > state.config.max_report_len {
            return Err(TrainError::Shape(format!(
                "report of {} tokens exceeds {}",
                report.len(),
                state.config.max_report_len
            )));
        }
        let logits = p.decode_logits(tape, Some(h), &state.instructions.generation, &report)?;
        let mut targets = report.clone();
        targets.push(eos);
        bd.tokens += targets.len();
        gens.push(gen_loss(tape, logits, &targets)?);
        bd.n_d += s.present.len();

        let v_d = if cfg.sca || cfg.eca {
            p.select(tape, v, &s.present, ctx.layer_map)?
        } else {
            None
        };
        if let (true, Some(v_d)) = (cfg.sca, v_d) {
            let targets = retrieved_targets(s, item.gallery, ctx.registry, ctx.layer_map)?;
            for (e, t) in s.present.iter().zip(&targets) {
                if t.is_none() {
                    bd.skipped.push(format!(
                        "L_seg:{}:{}",
                        s.sample_id, ctx.registry.entities[*e].name
                    ));
                }
            }
            let pred = p.segment(tape, v_d)?;
            if let Some(l) = dice_loss(tape, pred, &targets, cfg.loss.dice_eps)? {
                segs.push(l);
            }
        }
        if let (true, Some(v_d)) = (cfg.eca, v_d) {
            if s.present.len() >= 2 {
                let r_v = p.pool_entity(tape, v_d)?;
                let texts = s
                    .descriptions
                    .iter()
                    .map(|d| vocab.encode(d))
                    .collect::<Result<Vec<_>, _>>()?;
                let raw = text_rows(p, tape, &texts, ctx.bow)?;
                let r_w = p.map_text_entity(tape, raw)?;
                ecas.push(info_nce(tape, r_v, r_w, &cfg.loss)?);
            }
        }
        if cfg.tca {
            theme_v.push(p.pool_theme(tape, v)?);
            theme_text.push(report);
        }
    }

    let l_g = mean_of(tape, &gens)?.expect("nonempty batch");
    let l_seg = mean_of(tape, &segs)?;
    let l_cle = mean_of(tape, &ecas)?;
    let l_clt = if cfg.tca && batch.len() >= 2 {
        let r_v = stack(tape, &theme_v)?;
        let raw = text_rows(p, tape, &theme_text, ctx.bow)?;
        let r_w = p.map_text_theme(tape, raw)?;
        Some(info_nce(tape, r_v, r_w, &cfg.loss)?)
    } else {
        None
    };

    let value = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item().as_f64());
    bd.l_g = value(tape, Some(l_g));
    bd.l_seg = value(tape, l_seg);
    bd.l_cle = value(tape, l_cle);
    bd.l_clt = value(tape, l_clt);
    bd.l_total = total_loss(bd.l_g, bd.l_seg, bd.l_cle, bd.l_clt)?;
    for (name, v) in [("L_seg", l_seg), ("L_CLe", l_cle), ("L_CLt", l_clt)] {
        if v.is_none() {
            bd.skipped.push(name.to_string());
        }
    }
    let mut total = l_g;
    for v in [l_seg, l_cle, l_clt].into_iter().flatten() {
        total = tape.add(total, v)?;
    }
    Ok((total, bd))
}

/// Per-parameter gradients in layout order; `None` where none reached it.
pub type Gradients<T> = Vec<Option<Vec<T>>>;

/// Gradients of the joint objective for every parameter, in layout order;
/// `None` where no gradient reached the parameter.
pub fn batch_gradients<T: Real>(
    model: &ModelState<T>,
    batch: &[BatchItem<'_>],
    ctx: &StepContext<'_>,
) -> Result<(Gradients<T>, LossBreakdown), TrainError> {
    let mut tape = Tape::new();
    let p = model.bind(&mut tape, true);
    let (total, bd) = batch_loss(&p, &mut tape, batch, ctx)?;
    tape.backward(total)?;
    let grads = p
        .vars
        .iter()
        .map(|&v| tape.grad(v).map(<[T]>::to_vec))
        .collect();
    Ok((grads, bd))
}

/// Forward, backward, global-norm clipping and one AdamW update.
pub fn train_step<T: Real>(
    model: &mut ModelState<T>,
    opt: &mut AdamW,
    batch: &[BatchItem<'_>],
    ctx: &StepContext<'_>,
) -> Result<LossBreakdown, TrainError> {
    let (mut grads, mut bd) = batch_gradients(model, batch, ctx)?;
    if !grads
        .iter()
        .flatten()
        .all(|g| g.iter().all(|x| x.is_finite()))
    {
        return Err(TrainError::NonFinite("gradient".into()));
    }
    clip_global_norm(&mut grads, ctx.config.grad_clip_norm);
    opt.update(
        model.params_mut(),
        &grads,
        ctx.config.learning_rate,
        ctx.config.weight_decay,
    )?;
    bd.step = opt.step as usize;
    Ok(bd)
}
