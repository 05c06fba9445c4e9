use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{grad_check, Tape, Tensor, TensorError};

fn unwrap_tensor(e: LossError) -> TensorError {
    match e {
        LossError::Tensor(t) => t,
        other => panic!("unexpected loss error {other}"),
    }
}

fn rows(tape: &mut Tape<f64>, k: usize, d: usize, data: &[f64]) -> Var {
    tape.constant(Tensor::from_f64(vec![k, d], data).unwrap())
}

fn nce(a: &[f64], b: &[f64], k: usize, d: usize, cfg: &LossConfig) -> f64 {
    let mut tape = Tape::<f64>::new();
    let (ra, rb) = (rows(&mut tape, k, d, a), rows(&mut tape, k, d, b));
    let l = info_nce(&mut tape, ra, rb, cfg).unwrap();
    tape.value(l).item()
}

fn unit_cfg(mode: DenominatorMode) -> LossConfig {
    LossConfig {
        tau: 1.0,
        denominator_mode: mode,
        ..LossConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

#[test]
fn gen_loss_uniform_logits() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(vec![3, 4]));
    let l = gen_loss(&mut tape, logits, &[0, 3, 2]).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() <= 1e-12);
}

#[test]
fn gen_loss_saturated() {
    let mut tape = Tape::<f64>::new();
    let targets = [1, 0, 3];
    let mut data = vec![0.0; 12];
    for (i, &t) in targets.iter().enumerate() {
        data[i * 4 + t] = 50.0;
    }
    let logits = tape.constant(Tensor::from_f64(vec![3, 4], &data).unwrap());
    let l = gen_loss(&mut tape, logits, &targets).unwrap();
    let v = tape.value(l).item();
    assert!((0.0..=1e-20).contains(&v), "{v}");
}

#[test]
fn gen_loss_matches_direct_lse() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t, v) = (5, 7);
    let data: Vec<f64> = (0..t * v).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
    let mut expected = 0.0;
    for (i, &tg) in targets.iter().enumerate() {
        let row = &data[i * v..(i + 1) * v];
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        expected += lse - row[tg];
    }
    expected /= t as f64;
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::from_f64(vec![t, v], &data).unwrap());
    let l = gen_loss(&mut tape, logits, &targets).unwrap();
    assert!((tape.value(l).item() - expected).abs() <= 1e-12);
}

#[test]
fn gen_loss_rejects_bad_targets() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(Tensor::zeros(vec![2, 4]));
    assert_eq!(
        gen_loss(&mut tape, logits, &[0, 4]).unwrap_err(),
        LossError::Target(4)
    );
    assert!(matches!(
        gen_loss(&mut tape, logits, &[0]),
        Err(LossError::Shape(_))
    ));
}

#[test]
fn resize_identity_and_upsample() {
    let m = Mask::from_fn(5, 3, |x, y| (x + 2 * y) % 3 == 0);
    assert_eq!(resize_mask(&m, 5, 3).unwrap(), m);
    let checker = Mask::from_fn(2, 2, |x, y| (x + y) % 2 == 0);
    let up = resize_mask(&checker, 4, 4).unwrap();
    for y in 0..4 {
        for x in 0..4 {
            assert_eq!(up.get(x, y), checker.get(x / 2, y / 2));
        }
    }
    assert!(matches!(resize_mask(&m, 0, 4), Err(LossError::Shape(_))));
}

#[test]
fn resize_round_trip_on_even_square() {
    let sq = Mask::from_fn(32, 32, |x, y| (10..20).contains(&x) && (6..16).contains(&y));
    let down = resize_mask(&sq, 16, 16).unwrap();
    assert_eq!(down.area(), 25);
    assert_eq!(resize_mask(&down, 32, 32).unwrap(), sq);
}

fn dice_value(p: &[f64], shape: [usize; 3], targets: &[Option<Mask>], eps: f64) -> Option<f64> {
    let mut tape = Tape::<f64>::new();
    let pv = tape.constant(Tensor::from_f64(shape.to_vec(), p).unwrap());
    dice_loss(&mut tape, pv, targets, eps)
        .unwrap()
        .map(|l| tape.value(l).item())
}

#[test]
fn dice_analytic_values() {
    let y = Mask::from_fn(4, 4, |x, _| x < 2);
    let p: Vec<f64> = y.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let v = dice_value(&p, [1, 4, 4], &[Some(y.clone())], 1e-6).unwrap();
    assert!(v.abs() <= 1e-9, "{v}");

    let full = Mask::from_fn(4, 4, |_, _| true);
    let v = dice_value(&[0.0; 16], [1, 4, 4], &[Some(full.clone())], 1e-6).unwrap();
    assert!((v - (1.0 - 1e-6 / (16.0 + 1e-6))).abs() <= 1e-12);

    let v = dice_value(&[0.5; 16], [1, 4, 4], &[Some(full)], 1e-300).unwrap();
    assert!((v - 0.2).abs() <= 1e-9, "{v}");
}

#[test]
fn dice_skips_missing_entities() {
    let y = Mask::from_fn(2, 2, |x, _| x == 0);
    let mut p = vec![0.3; 8];
    p[4..].copy_from_slice(&[1.0, 0.0, 1.0, 0.0]);
    let both = dice_value(&p, [2, 2, 2], &[None, Some(y.clone())], 1e-6).unwrap();
    assert!(both.abs() < 1e-9);
    assert_eq!(dice_value(&p, [2, 2, 2], &[None, None], 1e-6), None);
    let mut tape = Tape::<f64>::new();
    let pv = tape.constant(Tensor::from_f64(vec![2, 2, 2], &p).unwrap());
    let wrong = Mask::empty(3, 3);
    assert!(matches!(
        dice_loss(&mut tape, pv, &[Some(wrong), None], 1e-6),
        Err(LossError::Shape(_))
    ));
    assert!(matches!(
        dice_loss(&mut tape, pv, &[None], 1e-6),
        Err(LossError::Shape(_))
    ));
}

#[test]
fn info_nce_degenerate_rows() {
    let a = [1.0, 0.0, 1.0, 0.0];
    let std = nce(&a, &a, 2, 2, &unit_cfg(DenominatorMode::Standard));
    assert!((std - 2f64.ln()).abs() <= 1e-9, "{std}");
    let paper = nce(&a, &a, 2, 2, &unit_cfg(DenominatorMode::Paper));
    assert!(paper.abs() <= 1e-9, "{paper}");
}

#[test]
fn info_nce_orthonormal_pairs() {
    let a = [1.0, 0.0, 0.0, 1.0];
    let v = nce(&a, &a, 2, 2, &unit_cfg(DenominatorMode::Standard));
    let expected = (1.0 + 1f64.exp()).ln() - 1.0;
    assert!((v - expected).abs() <= 1e-12);
    assert!((v - 0.313262).abs() < 1e-6);
}

#[test]
fn info_nce_paper_mode_goes_negative() {
    let c: f64 = 0.9;
    let a = [1.0, 0.0, c, (1.0 - c * c).sqrt()];
    let paper = nce(&a, &a, 2, 2, &unit_cfg(DenominatorMode::Paper));
    assert!((paper + 0.1).abs() <= 1e-12, "{paper}");
    let std = nce(&a, &a, 2, 2, &unit_cfg(DenominatorMode::Standard));
    assert!(std >= 0.0);
}

#[test]
fn info_nce_errors() {
    let cfg = LossConfig::default();
    let mut tape = Tape::<f64>::new();
    let one = rows(&mut tape, 1, 3, &[1.0, 2.0, 3.0]);
    assert_eq!(
        info_nce(&mut tape, one, one, &cfg).unwrap_err(),
        LossError::TooFewRows(1)
    );
    let z = rows(&mut tape, 2, 2, &[0.0, 0.0, 1.0, 0.0]);
    let ok = rows(&mut tape, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
    assert!(matches!(
        info_nce(&mut tape, z, ok, &cfg),
        Err(LossError::Tensor(_))
    ));
    let bad = LossConfig { tau: 0.0, ..cfg };
    assert!(matches!(
        info_nce(&mut tape, ok, ok, &bad),
        Err(LossError::Config(_))
    ));
}

#[test]
fn info_nce_scale_invariant_and_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in [DenominatorMode::Standard, DenominatorMode::Paper] {
        let cfg = LossConfig {
            tau: 0.3,
            alpha_v: 0.7,
            alpha_w: 0.2,
            denominator_mode: mode,
            ..LossConfig::default()
        };
        let (k, d) = (4, 5);
        let a = random(&mut rng, k * d);
        let b = random(&mut rng, k * d);
        let base = nce(&a, &b, k, d, &cfg);
        for c in [0.5, 3.0] {
            let sa: Vec<f64> = a.iter().map(|x| x * c).collect();
            let sb: Vec<f64> = b.iter().map(|x| x * c).collect();
            assert!((nce(&sa, &sb, k, d, &cfg) - base).abs() <= 1e-10);
        }
        let swapped = LossConfig {
            alpha_v: cfg.alpha_w,
            alpha_w: cfg.alpha_v,
            ..cfg
        };
        assert!((nce(&b, &a, k, d, &swapped) - base).abs() <= 1e-12);
    }
}

#[test]
fn total_loss_sums_exactly() {
    assert_eq!(total_loss(1.0, 0.0, 0.0, 0.0).unwrap(), 1.0);
    assert_eq!(total_loss(0.0, 0.0, 0.0, 0.0).unwrap(), 0.0);
    assert_eq!(total_loss(0.5, 0.25, 0.125, 2.0).unwrap(), 2.875);
    assert_eq!(
        total_loss(1.0, f64::NAN, 0.0, 0.0).unwrap_err(),
        LossError::NonFinite("L_seg")
    );
}

#[test]
fn breakdown_json_keys() {
    let b = LossBreakdown {
        step: 3,
        l_g: 1.5,
        l_total: 1.5,
        skipped: vec!["L_CLt".into()],
        ..LossBreakdown::default()
    };
    let v: serde_json::Value = serde_json::from_str(&b.to_json_line()).unwrap();
    for k in [
        "step", "L_g", "L_seg", "L_CLe", "L_CLt", "L_total", "N_d", "N_b", "skipped",
    ] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    assert_eq!(serde_json::from_value::<LossBreakdown>(v).unwrap(), b);
}

#[test]
fn loss_gradients_match_finite_differences() {
    for seed in 0..3u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_f64(vec![3, 5], &random(&mut rng, 15)).unwrap();
        let r = grad_check(
            |t, v| gen_loss(t, v[0], &[1, 4, 0]).map_err(unwrap_tensor),
            &[logits],
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error <= 1e-4, "gen {r:?}");

        let p: Vec<f64> = (0..18).map(|_| rng.gen_range(0.05..0.95)).collect();
        let masks = vec![
            Some(Mask::from_fn(3, 3, |x, y| x <= y)),
            None,
            Some(Mask::from_fn(3, 3, |x, _| x == 1)),
        ];
        let p3: Vec<f64> = p.iter().chain(&p[..9]).copied().collect();
        let r = grad_check(
            |t, v| {
                dice_loss(t, v[0], &masks, 1e-6)
                    .map_err(unwrap_tensor)
                    .map(|o| o.unwrap())
            },
            &[Tensor::from_f64(vec![3, 3, 3], &p3).unwrap()],
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error <= 1e-4, "dice {r:?}");

        for mode in [DenominatorMode::Standard, DenominatorMode::Paper] {
            let cfg = LossConfig {
                tau: 0.5,
                denominator_mode: mode,
                ..LossConfig::default()
            };
            let a = Tensor::from_f64(vec![3, 4], &random(&mut rng, 12)).unwrap();
            let b = Tensor::from_f64(vec![3, 4], &random(&mut rng, 12)).unwrap();
            let r = grad_check(
                |t, v| info_nce(t, v[0], v[1], &cfg).map_err(unwrap_tensor),
                &[a, b],
                1e-6,
            )
            .unwrap();
            assert!(r.max_relative_error <= 1e-4, "nce {mode:?} {r:?}");
        }
    }
}

proptest! {
    #[test]
    fn dice_is_bounded(p in proptest::collection::vec(0.001f64..0.999, 16), bits in proptest::collection::vec(any::<bool>(), 16)) {
        let m = Mask::from_fn(4, 4, |x, y| bits[y * 4 + x]);
        let v = dice_value(&p, [1, 4, 4], &[Some(m)], 1e-6).unwrap();
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&v));
    }

    #[test]
    fn info_nce_standard_is_nonnegative_at_unit_weights(
        a in proptest::collection::vec(-1.0f64..1.0, 9),
        b in proptest::collection::vec(-1.0f64..1.0, 9),
    ) {
        prop_assume!(a.chunks(3).chain(b.chunks(3)).all(|r| r.iter().map(|x| x * x).sum::<f64>() > 1e-3));
        let cfg = LossConfig { tau: 0.2, ..LossConfig::default() };
        prop_assert!(nce(&a, &b, 3, 3, &cfg) >= 0.0);
    }
}
