//! Generation cross-entropy, Dice segmentation alignment, symmetric InfoNCE
//! and their unweighted sum.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::Mask;
use crate::tensor::{Real, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("contrastive term needs at least 2 rows, got {0}")]
    TooFewRows(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target id {0} outside the vocabulary")]
    Target(usize),
    #[error("non-finite loss term {0}")]
    NonFinite(&'static str),
    #[error("invalid loss config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenominatorMode {
    /// Partition over all j, diagonal included.
    Standard,
    /// Partition over j != i only.
    Paper,
}

impl std::str::FromStr for DenominatorMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "standard" => Ok(Self::Standard),
            "paper" => Ok(Self::Paper),
            other => Err(format!("unknown denominator mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub alpha_v: f64,
    pub alpha_w: f64,
    pub denominator_mode: DenominatorMode,
    pub dice_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.07,
            alpha_v: 0.5,
            alpha_w: 0.5,
            denominator_mode: DenominatorMode::Standard,
            dice_eps: 1e-6,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(LossError::Config("tau must be positive".into()));
        }
        if !(self.alpha_v >= 0.0 && self.alpha_w >= 0.0) {
            return Err(LossError::Config(
                "alpha weights must be nonnegative".into(),
            ));
        }
        if self.dice_eps.is_nan() || self.dice_eps <= 0.0 {
            return Err(LossError::Config("dice_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-step values of the four terms and the counts behind them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    #[serde(rename = "L_g")]
    pub l_g: f64,
    #[serde(rename = "L_seg")]
    pub l_seg: f64,
    #[serde(rename = "L_CLe")]
    pub l_cle: f64,
    #[serde(rename = "L_CLt")]
    pub l_clt: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub tokens: usize,
    #[serde(rename = "N_d")]
    pub n_d: usize,
    #[serde(rename = "N_b")]
    pub n_b: usize,
    pub skipped: Vec<String>,
}

impl LossBreakdown {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("breakdown serializes")
    }
}

/// Mean over positions of `-log softmax(logits)[target]`.
pub fn gen_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    targets: &[usize],
) -> Result<Var, LossError> {
    let shape = tape.shape(logits).to_vec();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(LossError::Shape(format!(
            "{} targets for logits {:?}",
            targets.len(),
            shape
        )));
    }
    let v = shape[1];
    if let Some(&t) = targets.iter().find(|&&t| t >= v) {
        return Err(LossError::Target(t));
    }
    let lp = tape.log_softmax(logits, 1)?;
    let index: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| i * v + t)
        .collect();
    let picked = tape.gather(lp, &index, &[targets.len()])?;
    let mean = tape.mean_all(picked)?;
    Ok(tape.neg(mean)?)
}

/// Nearest-neighbour resampling to `width x height`.
pub fn resize_mask(mask: &Mask, width: usize, height: usize) -> Result<Mask, LossError> {
    if width == 0 || height == 0 {
        return Err(LossError::Shape("zero-sized resize target".into()));
    }
    Ok(Mask::from_fn(width, height, |x, y| {
        mask.get(x * mask.width / width, y * mask.height / height)
    }))
}

/// Mean Dice loss over entities with a target; `None` marks an entity whose
/// retrieval was skipped. Returns `None` when every entity was skipped.
pub fn dice_loss<T: Real>(
    tape: &mut Tape<T>,
    predicted: Var,
    targets: &[Option<Mask>],
    eps: f64,
) -> Result<Option<Var>, LossError> {
    let shape = tape.shape(predicted).to_vec();
    if shape.len() != 3 || shape[0] != targets.len() {
        return Err(LossError::Shape(format!(
            "{} targets for predictions {:?}",
            targets.len(),
            shape
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let kept: Vec<(usize, &Mask)> = targets
        .iter()
        .enumerate()
        .filter_map(|(i, m)| m.as_ref().map(|m| (i, m)))
        .collect();
    if kept.is_empty() {
        return Ok(None);
    }
    for (_, m) in &kept {
        if (m.width, m.height) != (w, h) {
            return Err(LossError::Shape(format!(
                "mask {}x{} against prediction {w}x{h}",
                m.width, m.height
            )));
        }
    }
    let n = kept.len();
    let p = if n == targets.len() {
        predicted
    } else {
        let parts = kept
            .iter()
            .map(|&(i, _)| tape.slice(predicted, 0, i, 1))
            .collect::<Result<Vec<_>, _>>()?;
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts, 0)?
        }
    };
    let p = tape.reshape(p, &[n, h * w])?;
    let y: Vec<T> = kept
        .iter()
        .flat_map(|(_, m)| m.bits.iter().map(|&b| if b { T::one() } else { T::zero() }))
        .collect();
    let y_sum: Vec<T> = kept
        .iter()
        .map(|(_, m)| T::from_f64_lossy(m.area() as f64 + eps))
        .collect();
    let yv = tape.constant(Tensor::new(vec![n, h * w], y)?);
    let ys = tape.constant(Tensor::new(vec![n], y_sum)?);
    let py = tape.mul(p, yv)?;
    let inter = tape.sum(py, 1)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.offset(num, eps)?;
    let pp = tape.mul(p, p)?;
    let p2 = tape.sum(pp, 1)?;
    let den = tape.add(p2, ys)?;
    let ratio = tape.div(num, den)?;
    let mean = tape.mean_all(ratio)?;
    let neg = tape.neg(mean)?;
    Ok(Some(tape.offset(neg, 1.0)?))
}

/// Sum over rows of the diagonal log-probabilities of `s`, normalized along
/// axis 1 either over all columns or over off-diagonal columns only.
fn diagonal_log_prob<T: Real>(
    tape: &mut Tape<T>,
    s: Var,
    k: usize,
    mode: DenominatorMode,
) -> Result<Var, LossError> {
    let diag_idx: Vec<usize> = (0..k).map(|i| i * k + i).collect();
    let diag = tape.gather(s, &diag_idx, &[k])?;
    let lse = match mode {
        DenominatorMode::Standard => tape.logsumexp(s, 1)?,
        DenominatorMode::Paper => {
            let off: Vec<usize> = (0..k)
                .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| i * k + j))
                .collect();
            let off = tape.gather(s, &off, &[k, k - 1])?;
            tape.logsumexp(off, 1)?
        }
    };
    let lp = tape.sub(diag, lse)?;
    Ok(tape.sum_all(lp)?)
}

/// Symmetric InfoNCE over `K` paired rows of `r_a` (weighted by `alpha_v`)
/// and `r_b` (weighted by `alpha_w`).
pub fn info_nce<T: Real>(
    tape: &mut Tape<T>,
    r_a: Var,
    r_b: Var,
    cfg: &LossConfig,
) -> Result<Var, LossError> {
    cfg.validate()?;
    let (sa, sb) = (tape.shape(r_a).to_vec(), tape.shape(r_b).to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(LossError::Shape(format!("{sa:?} vs {sb:?}")));
    }
    let k = sa[0];
    if k < 2 {
        return Err(LossError::TooFewRows(k));
    }
    let an = tape.l2_normalize(r_a)?;
    let bn = tape.l2_normalize(r_b)?;
    let sim = tape.matmul_t(an, bn, false, true)?;
    let s_a = tape.scale(sim, 1.0 / cfg.tau)?;
    let s_b = tape.transpose(s_a)?;
    let ta = diagonal_log_prob(tape, s_a, k, cfg.denominator_mode)?;
    let tb = diagonal_log_prob(tape, s_b, k, cfg.denominator_mode)?;
    let ta = tape.scale(ta, -0.5 * cfg.alpha_v)?;
    let tb = tape.scale(tb, -0.5 * cfg.alpha_w)?;
    Ok(tape.add(ta, tb)?)
}

/// `L = L_g + L_seg + L_CLe + L_CLt`.
pub fn total_loss(l_g: f64, l_seg: f64, l_cle: f64, l_clt: f64) -> Result<f64, LossError> {
    for (name, v) in [
        ("L_g", l_g),
        ("L_seg", l_seg),
        ("L_CLe", l_cle),
        ("L_CLt", l_clt),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFinite(name));
        }
    }
    Ok(l_g + l_seg + l_cle + l_clt)
}

#[cfg(test)]
mod tests;
