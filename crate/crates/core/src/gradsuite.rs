//! Finite-difference verification of every tape primitive and every loss
//! term, each on several seeded random points in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::losses::{dice_loss, gen_loss, info_nce, DenominatorMode, LossConfig};
use crate::raster::Mask;
use crate::tensor::{grad_check, Tape, Tensor, TensorError, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-6;
pub const SEEDS: u64 = 10;

type CaseFn = fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Domain {
    Normal,
    /// Uniform in [0.5, 2).
    Positive,
}

pub struct Case {
    pub name: &'static str,
    inputs: &'static [(&'static [usize], Domain)],
    f: CaseFn,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: &'static str,
    pub seed: u64,
    pub max_relative_error: f64,
    pub coordinates: usize,
    pub error: Option<String>,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.error.is_none() && self.max_relative_error <= TOLERANCE
    }
}

use Domain::{Normal as N, Positive as P};

fn weighted(t: &mut Tape<f64>, y: Var, w: Var) -> Result<Var, TensorError> {
    let p = t.mul(y, w)?;
    t.sum_all(p)
}

fn loss_err(e: crate::losses::LossError) -> TensorError {
    match e {
        crate::losses::LossError::Tensor(t) => t,
        _ => TensorError::NonFinite { op: "loss" },
    }
}

fn masks() -> Vec<Option<Mask>> {
    vec![
        Some(Mask::from_fn(4, 4, |x, y| x + y < 4)),
        None,
        Some(Mask::from_fn(4, 4, |x, _| x % 2 == 0)),
    ]
}

fn dice(t: &mut Tape<f64>, x: Var) -> Result<Var, TensorError> {
    let p = t.sigmoid(x)?;
    Ok(dice_loss(t, p, &masks(), 1e-6)
        .map_err(loss_err)?
        .expect("two supervised entities"))
}

fn nce(
    t: &mut Tape<f64>,
    a: Var,
    b: Var,
    mode: DenominatorMode,
    tau: f64,
) -> Result<Var, TensorError> {
    let cfg = LossConfig {
        tau,
        denominator_mode: mode,
        ..LossConfig::default()
    };
    info_nce(t, a, b, &cfg).map_err(loss_err)
}

const TARGETS: [usize; 4] = [2, 0, 4, 2];

pub fn cases() -> Vec<Case> {
    macro_rules! case {
        ($name:expr, [$($s:expr),*], |$t:ident, $v:ident| $body:expr) => {
            Case {
                name: $name,
                inputs: &[$($s),*],
                f: |$t: &mut Tape<f64>, $v: &[Var]| $body,
            }
        };
    }
    vec![
        case!("add", [(&[3, 4], N), (&[3, 4], N), (&[3, 4], N)], |t, v| {
            let y = t.add(v[0], v[1])?;
            weighted(t, y, v[2])
        }),
        case!(
            "add_broadcast",
            [(&[3, 4], N), (&[4], N), (&[3, 4], N)],
            |t, v| {
                let y = t.add(v[0], v[1])?;
                weighted(t, y, v[2])
            }
        ),
        case!("sub", [(&[3, 4], N), (&[3, 4], N), (&[3, 4], N)], |t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted(t, y, v[2])
        }),
        case!("mul", [(&[3, 4], N), (&[3, 4], N), (&[3, 4], N)], |t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted(t, y, v[2])
        }),
        case!("div", [(&[3, 4], N), (&[3, 4], P), (&[3, 4], N)], |t, v| {
            let y = t.div(v[0], v[1])?;
            weighted(t, y, v[2])
        }),
        case!("scale_offset_neg", [(&[5], N), (&[5], N)], |t, v| {
            let a = t.scale(v[0], -1.7)?;
            let b = t.offset(a, 0.3)?;
            let c = t.neg(b)?;
            weighted(t, c, v[1])
        }),
        case!(
            "matmul",
            [(&[3, 4], N), (&[4, 2], N), (&[3, 2], N)],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y, v[2])
            }
        ),
        case!(
            "matmul_transposed",
            [(&[4, 3], N), (&[2, 4], N), (&[3, 2], N)],
            |t, v| {
                let y = t.matmul_t(v[0], v[1], true, true)?;
                weighted(t, y, v[2])
            }
        ),
        case!(
            "matmul_batched",
            [(&[2, 3, 4], N), (&[2, 4, 2], N), (&[2, 3, 2], N)],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted(t, y, v[2])
            }
        ),
        case!("permute", [(&[2, 3, 4], N), (&[4, 2, 3], N)], |t, v| {
            let y = t.permute(v[0], &[2, 0, 1])?;
            weighted(t, y, v[1])
        }),
        case!("transpose_reshape", [(&[3, 4], N), (&[2, 6], N)], |t, v| {
            let a = t.transpose(v[0])?;
            let b = t.reshape(a, &[2, 6])?;
            weighted(t, b, v[1])
        }),
        case!(
            "concat_slice",
            [(&[2, 3], N), (&[2, 2], N), (&[2, 3], N)],
            |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.slice(c, 1, 1, 3)?;
                weighted(t, s, v[2])
            }
        ),
        case!("gather", [(&[3, 4], N), (&[2, 3], N)], |t, v| {
            let g = t.gather(v[0], &[0, 5, 5, 11, 3, 0], &[2, 3])?;
            weighted(t, g, v[1])
        }),
        case!("gather_rows", [(&[5, 3], N), (&[4, 3], N)], |t, v| {
            let g = t.gather_rows(v[0], &[4, 1, 4, 0])?;
            weighted(t, g, v[1])
        }),
        case!("exp", [(&[6], N), (&[6], N)], |t, v| {
            let y = t.exp(v[0])?;
            weighted(t, y, v[1])
        }),
        case!("log", [(&[6], P), (&[6], N)], |t, v| {
            let y = t.log(v[0])?;
            weighted(t, y, v[1])
        }),
        case!("powf", [(&[6], P), (&[6], N)], |t, v| {
            let y = t.powf(v[0], 1.5)?;
            weighted(t, y, v[1])
        }),
        case!("powf_integral", [(&[6], N), (&[6], N)], |t, v| {
            let y = t.powf(v[0], 3.0)?;
            weighted(t, y, v[1])
        }),
        case!("sigmoid", [(&[6], N), (&[6], N)], |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted(t, y, v[1])
        }),
        case!("gelu", [(&[6], N), (&[6], N)], |t, v| {
            let y = t.gelu(v[0])?;
            weighted(t, y, v[1])
        }),
        case!("relu", [(&[6], N), (&[6], N)], |t, v| {
            let y = t.relu(v[0])?;
            weighted(t, y, v[1])
        }),
        case!("sum_mean", [(&[3, 4], N), (&[4], N), (&[3], N)], |t, v| {
            let s = t.sum(v[0], 0)?;
            let m = t.mean(v[0], 1)?;
            let a = weighted(t, s, v[1])?;
            let b = weighted(t, m, v[2])?;
            t.add(a, b)
        }),
        case!("max", [(&[3, 4], N), (&[3], N)], |t, v| {
            let y = t.max(v[0], 1)?;
            weighted(t, y, v[1])
        }),
        case!("mean_all", [(&[3, 4], N)], |t, v| {
            let y = t.mul(v[0], v[0])?;
            t.mean_all(y)
        }),
        case!("softmax", [(&[3, 4], N), (&[3, 4], N)], |t, v| {
            let y = t.softmax(v[0], 1)?;
            weighted(t, y, v[1])
        }),
        case!("log_softmax", [(&[3, 4], N), (&[3, 4], N)], |t, v| {
            let y = t.log_softmax(v[0], 0)?;
            weighted(t, y, v[1])
        }),
        case!("logsumexp", [(&[3, 4], N), (&[3], N)], |t, v| {
            let y = t.logsumexp(v[0], 1)?;
            weighted(t, y, v[1])
        }),
        case!("layer_norm", [(&[3, 5], N), (&[3, 5], N)], |t, v| {
            let y = t.layer_norm(v[0], 1e-5)?;
            weighted(t, y, v[1])
        }),
        case!("l2_normalize", [(&[3, 4], N), (&[3, 4], N)], |t, v| {
            let y = t.l2_normalize(v[0])?;
            weighted(t, y, v[1])
        }),
        case!(
            "cosine_rows",
            [(&[3, 4], N), (&[3, 4], N), (&[3], N)],
            |t, v| {
                let y = t.cosine_rows(v[0], v[1])?;
                weighted(t, y, v[2])
            }
        ),
        case!(
            "linear",
            [(&[2, 3], N), (&[3, 4], N), (&[4], N), (&[2, 4], N)],
            |t, v| {
                let y = t.linear(v[0], v[1], v[2])?;
                weighted(t, y, v[3])
            }
        ),
        case!("loss_generation", [(&[4, 5], N)], |t, v| gen_loss(
            t, v[0], &TARGETS
        )
        .map_err(loss_err)),
        case!("loss_dice", [(&[3, 4, 4], N)], |t, v| dice(t, v[0])),
        case!(
            "loss_entity_alignment",
            [(&[3, 4], N), (&[3, 4], N)],
            |t, v| { nce(t, v[0], v[1], DenominatorMode::Standard, 0.07) }
        ),
        case!(
            "loss_entity_alignment_paper",
            [(&[3, 4], N), (&[3, 4], N)],
            |t, v| { nce(t, v[0], v[1], DenominatorMode::Paper, 0.07) }
        ),
        case!(
            "loss_theme_alignment",
            [(&[4, 3], N), (&[4, 3], N)],
            |t, v| { nce(t, v[0], v[1], DenominatorMode::Standard, 0.5) }
        ),
        case!(
            "loss_joint",
            [
                (&[4, 5], N),
                (&[3, 4, 4], N),
                (&[3, 4], N),
                (&[3, 4], N),
                (&[2, 4], N),
                (&[2, 4], N)
            ],
            |t, v| {
                let g = gen_loss(t, v[0], &TARGETS).map_err(loss_err)?;
                let s = dice(t, v[1])?;
                let e = nce(t, v[2], v[3], DenominatorMode::Standard, 0.07)?;
                let m = nce(t, v[4], v[5], DenominatorMode::Standard, 0.5)?;
                let a = t.add(g, s)?;
                let b = t.add(e, m)?;
                t.add(a, b)
            }
        ),
    ]
}

fn point(case: &Case, index: usize, seed: u64) -> Vec<Tensor<f64>> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(index as u64));
    case.inputs
        .iter()
        .map(|(shape, dom)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| match dom {
                    Domain::Normal => StandardNormal.sample(&mut rng),
                    Domain::Positive => rng.gen_range(0.5..2.0),
                })
                .collect();
            Tensor::new(shape.to_vec(), data).expect("shape matches data")
        })
        .collect()
}

/// Runs every case on seeds `0..seeds`.
pub fn run(seeds: u64) -> Vec<CaseResult> {
    let mut out = Vec::new();
    for (i, case) in cases().iter().enumerate() {
        for seed in 0..seeds {
            let r = grad_check(case.f, &point(case, i, seed), STEP);
            out.push(match r {
                Ok(r) => CaseResult {
                    name: case.name,
                    seed,
                    max_relative_error: r.max_relative_error,
                    coordinates: r.coordinates,
                    error: None,
                },
                Err(e) => CaseResult {
                    name: case.name,
                    seed,
                    max_relative_error: f64::INFINITY,
                    coordinates: 0,
                    error: Some(e.to_string()),
                },
            });
        }
    }
    out
}
