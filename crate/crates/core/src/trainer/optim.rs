use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::tensor::{Real, Tensor};

/// Decoupled-weight-decay Adam moments for a fixed list of parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Real>(params: &[Tensor<T>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update. Parameters whose gradient is `None` are left untouched,
    /// moments and decay included.
    pub fn update<T: Real>(
        &mut self,
        params: &mut [Tensor<T>],
        grads: &[Option<Vec<T>>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(TrainError::Shape(format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if let Some(g) = g {
                if g.len() != p.len() || self.m[i].len() != p.len() {
                    return Err(TrainError::Shape(format!(
                        "gradient {i} has {} entries for {}",
                        g.len(),
                        p.len()
                    )));
                }
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(TrainError::NonFinite("gradient".into()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - self.beta1.powi(t), 1.0 - self.beta2.powi(t));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let (mh, vh) = (m[j] / c1, v[j] / c2);
                let old = w.as_f64();
                *w = T::from_f64_lossy(
                    old - lr * (mh / (vh.sqrt() + self.eps)) - lr * weight_decay * old,
                );
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Real>(grads: &[Option<Vec<T>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut [Option<Vec<T>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x = T::from_f64_lossy(x.as_f64() * s);
            }
        }
    }
    norm
}
