use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::state::ModelState;
use super::ModelError;
use crate::raster::Grid;
use crate::tensor::{Real, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_len: usize,
    /// Argmax decoding regardless of temperature and top_p.
    pub greedy: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.9,
            max_len: 160,
            greedy: false,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            greedy: true,
            max_len,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.greedy && !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(ModelError::Sampling(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ModelError::Sampling(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        Ok(())
    }
}

/// Index of the largest logit; ties go to the lower id.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Nucleus sampling: temperature-scaled softmax, keep the smallest
/// probability-sorted prefix with mass >= `top_p`, renormalize, draw.
pub fn nucleus_sample(logits: &[f64], temperature: f64, top_p: f64, rng: &mut impl Rng) -> usize {
    let scaled: Vec<f64> = logits.iter().map(|&l| l / temperature).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = scaled.iter().map(|&l| (l - m).exp()).enumerate().collect();
    let z: f64 = probs.iter().map(|p| p.1).sum();
    probs.iter_mut().for_each(|p| p.1 /= z);
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep = 0;
    let mut mass = 0.0;
    while keep < probs.len() {
        mass += probs[keep].1;
        keep += 1;
        if mass >= top_p {
            break;
        }
    }
    let kept = &probs[..keep];
    let total: f64 = kept.iter().map(|p| p.1).sum();
    let mut u = rng.gen::<f64>() * total;
    for &(id, p) in kept {
        if u < p {
            return id;
        }
        u -= p;
    }
    kept[keep - 1].0
}

impl<T: Real> ModelState<T> {
    /// Visual tokens `H_v` for one sample, detached from any tape.
    pub fn visual_tokens(&self, slices: &[Grid]) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let v = p.encode_images(&mut tape, slices)?;
        let h = p.project(&mut tape, v)?;
        Ok(tape.value(h).clone())
    }

    /// Autoregressive decoding after `[H_v; instruction]`. The end token is
    /// not included in the result.
    pub fn generate(
        &self,
        h_v: &Tensor<T>,
        instruction: &[usize],
        cfg: &SamplingConfig,
    ) -> Result<Vec<usize>, ModelError> {
        cfg.validate()?;
        let eos = self.vocab.eos();
        let max_len = cfg.max_len.min(self.config.max_report_len);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let hv = tape.constant(h_v.clone());
        let mark = tape.len();
        let mut out = Vec::new();
        while out.len() < max_len {
            tape.truncate(mark);
            let (hidden, _) = p.decoder_hidden(&mut tape, Some(hv), instruction, &out)?;
            let len = tape.shape(hidden)[0];
            let last = tape.slice(hidden, 0, len - 1, 1)?;
            let logits = p.lm_head(&mut tape, last)?;
            let row: Vec<f64> = tape.data(logits).iter().map(|v| v.as_f64()).collect();
            let next = if cfg.greedy {
                argmax(&row)
            } else {
                nucleus_sample(&row, cfg.temperature, cfg.top_p, &mut rng)
            };
            if next == eos {
                break;
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Generated report text for a sample's slices.
    pub fn generate_report(
        &self,
        slices: &[Grid],
        cfg: &SamplingConfig,
    ) -> Result<String, ModelError> {
        let hv = self.visual_tokens(slices)?;
        let ids = self.generate(&hv, &self.instructions.generation, cfg)?;
        Ok(self.vocab.decode(&ids)?)
    }
}
