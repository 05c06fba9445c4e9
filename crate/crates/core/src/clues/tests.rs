use proptest::prelude::*;

use super::*;
use crate::clinic::{generate_sample, generate_sample_with, make_registry, GeneratorConfig};

fn square_slice() -> Grid {
    Grid::from_fn(32, 32, |x, y| {
        if (12..17).contains(&x) && (12..17).contains(&y) {
            0.8
        } else {
            0.0
        }
    })
}

#[test]
fn blank_slice_has_no_proposals() {
    assert!(propose_masks(&Grid::new(32, 32), 0, &ProposalConfig::default()).is_empty());
}

#[test]
fn uniform_square_is_one_exact_candidate() {
    let g = square_slice();
    let cands = propose_masks(&g, 0, &ProposalConfig::default());
    assert_eq!(cands.len(), 1);
    assert_eq!(cands[0].area, 25);
    assert_eq!(cands[0].stability, 1.0);
    assert!((cands[0].mean_intensity - 0.8).abs() < 1e-15);
}

#[test]
fn stability_on_ramp_is_below_one() {
    let ramp = Grid::from_fn(32, 32, |x, _| x as f64 / 31.0);
    let s = stability_score(&ramp, (30, 5), &ProposalConfig::default()).unwrap();
    assert!(s < 1.0 && s > 0.0);
    assert_eq!(
        stability_score(&square_slice(), (14, 14), &ProposalConfig::default()),
        Ok(1.0)
    );
    assert_eq!(
        stability_score(&Grid::new(32, 32), (3, 3), &ProposalConfig::default()),
        Err(ClueError::EmptyPerturbation)
    );
}

#[test]
fn stability_golden_on_fixture_slice() {
    let (r, lm) = make_registry(0);
    let s = generate_sample(&r, &lm, 3);
    let ramp = Grid::from_fn(32, 32, |x, y| {
        s.slices[0].get(x, y) + 0.5 * (x as f64) / 31.0
    });
    let v = stability_score(&ramp, (30, 16), &ProposalConfig::default()).unwrap();
    assert!((v - STABILITY_GOLDEN).abs() < 1e-12, "{v}");
}

const STABILITY_GOLDEN: f64 = 0.6407185628742516;

#[test]
fn filter_rules() {
    let g = square_slice();
    let c = propose_masks(&g, 0, &ProposalConfig::default()).remove(0);
    let kept = filter_masks(&[c.clone(), c.clone()], &FilterConfig::default());
    assert_eq!(kept.len(), 1);
    let tiny = MaskCandidate::new(0, Mask::from_fn(32, 32, |x, y| x < 2 && y < 2), 1.0, &g);
    assert!(filter_masks(&[tiny], &FilterConfig::default()).is_empty());
    let once = filter_masks(std::slice::from_ref(&c), &FilterConfig::default());
    assert_eq!(filter_masks(&once, &FilterConfig::default()), once);
}

#[test]
fn dedup_prefers_stable_then_large() {
    let g = Grid::new(32, 32);
    let big = Mask::from_fn(32, 32, |x, y| x < 10 && y < 10);
    let near = Mask::from_fn(32, 32, |x, y| x < 10 && y < 10 && !(x == 9 && y == 9));
    let a = MaskCandidate::new(0, big.clone(), 0.95, &g);
    let b = MaskCandidate::new(0, near.clone(), 0.99, &g);
    let kept = filter_masks(&[a.clone(), b.clone()], &FilterConfig::default());
    assert_eq!(kept, vec![b.clone()]);
    let a2 = MaskCandidate::new(0, big, 0.99, &g);
    let kept = filter_masks(&[b, a2.clone()], &FilterConfig::default());
    assert_eq!(kept, vec![a2]);
}

#[test]
fn planted_shapes_are_proposed() {
    let (r, lm) = make_registry(0);
    for seed in 0..60 {
        let s = generate_sample(&r, &lm, seed);
        let g = build_gallery(&s, &ProposalConfig::default(), &FilterConfig::default());
        for (&(_, slice), truth) in &s.masks {
            let best = g
                .on_slice(slice)
                .map(|c| c.mask.iou(truth))
                .fold(0.0, f64::max);
            assert!(best >= 0.8, "seed {seed} slice {slice}: {best}");
        }
    }
}

#[test]
fn empty_sample_gives_empty_gallery() {
    let (r, lm) = make_registry(0);
    let cfg = GeneratorConfig {
        max_entities: 0,
        mean_entities: 0.0,
    };
    let s = generate_sample_with(&r, &lm, 1, &cfg);
    let g = build_gallery(&s, &ProposalConfig::default(), &FilterConfig::default());
    assert!(g.candidates.is_empty() && g.truths.is_empty());
}

#[test]
fn golden_gallery_count_seed_7() {
    let (r, lm) = make_registry(0);
    let s = generate_sample(&r, &lm, 7);
    let f = FilterConfig::default();
    let g = build_gallery(&s, &ProposalConfig::default(), &f);
    assert_eq!(g.candidates.len(), GOLDEN_COUNT);
    for c in &g.candidates {
        assert!(c.area >= f.min_area && c.area <= 512 && c.stability >= f.min_stability);
    }
}

const GOLDEN_COUNT: usize = 2;

#[test]
fn restriction_follows_layers() {
    let (r, lm) = make_registry(0);
    let s = generate_sample(&r, &lm, 11);
    let g = build_gallery(&s, &ProposalConfig::default(), &FilterConfig::default());
    let e = (0..24).find(|&e| lm.layers(e) == [2]).unwrap();
    for c in restrict_gallery(&g, e, &lm) {
        assert!((6..9).contains(&c.slice_index));
    }
    let all_layers = LayerMap::from_entity_layers(vec![(0..8).collect(); 24]);
    assert_eq!(
        restrict_gallery(&g, 0, &all_layers).len(),
        g.candidates.len()
    );
    let _ = r;
}

#[test]
fn retrieval_edge_cases() {
    let (r, _) = make_registry(0);
    let e = &r.entities[4];
    let d = e.abnormal_sentence();
    assert_eq!(retrieve(&[], &d, &r), Err(ClueError::EmptyGallery(4)));
    let g = square_slice();
    let c = propose_masks(&g, 3, &ProposalConfig::default()).remove(0);
    assert!(matches!(
        retrieve(&[&c], "nothing here", &r),
        Err(ClueError::NoEntity(_))
    ));
    let one = retrieve(&[&c], &d, &r).unwrap();
    let q = QueryEmbedding::of_entity(&r, 4, 32, 32);
    assert_eq!(one.score, QueryEmbedding::of_candidate(&c).cosine(&q));
    assert_eq!(one.searched, 1);
}

#[test]
fn retrieval_finds_exact_descriptor_match() {
    let (r, _) = make_registry(0);
    let q = QueryEmbedding::of_entity(&r, 0, 32, 32);
    assert!((q.0.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
    assert!((q.cosine(&q) - 1.0).abs() < 1e-12);
}

#[test]
fn gallery_round_trip_and_corruption() {
    let (r, lm) = make_registry(0);
    let s = generate_sample(&r, &lm, 7);
    let g = build_gallery(&s, &ProposalConfig::default(), &FilterConfig::default());
    let bytes = encode_gallery(&g);
    let back = decode_gallery(&bytes).unwrap();
    assert_eq!(back, g);
    assert_eq!(encode_gallery(&back), bytes);
    let mut bad = bytes.clone();
    bad[20] ^= 1;
    assert!(matches!(decode_gallery(&bad), Err(FormatError::Checksum)));
    assert!(decode_gallery(&bytes[..bytes.len() - 3]).is_err());
    let mut magic = bytes;
    magic[0] = b'X';
    assert!(matches!(decode_gallery(&magic), Err(FormatError::Magic)));
}

#[test]
fn retrieval_calibration_small() {
    let stats = retrieval_benchmark(0, 1000, 200, 0.5);
    assert_eq!(stats.layer_violations, 0);
    assert!(stats.hit_rate() >= 0.95, "{stats:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn filter_is_idempotent_and_order_insensitive(seed in 0u64..500, rot in 0usize..17) {
        let (r, lm) = make_registry(0);
        let s = generate_sample(&r, &lm, seed);
        let cfg = FilterConfig::default();
        for (i, slice) in s.slices.iter().enumerate() {
            let mut cands = propose_masks(slice, i, &ProposalConfig::default());
            let once = filter_masks(&cands, &cfg);
            prop_assert_eq!(&filter_masks(&once, &cfg), &once);
            if !cands.is_empty() {
                let k = rot % cands.len();
                cands.rotate_left(k);
                cands.reverse();
            }
            prop_assert_eq!(&filter_masks(&cands, &cfg), &once);
            for (a, b) in once.iter().zip(once.iter().skip(1)) {
                prop_assert!(a.mask.iou(&b.mask) <= cfg.dedup_iou);
            }
        }
    }

    #[test]
    fn iou_is_symmetric(a in proptest::collection::vec(any::<bool>(), 64), b in proptest::collection::vec(any::<bool>(), 64)) {
        let ma = Mask { width: 8, height: 8, bits: a };
        let mb = Mask { width: 8, height: 8, bits: b };
        prop_assert_eq!(ma.iou(&mb), mb.iou(&ma));
        prop_assert_eq!(ma.iou(&ma), 1.0);
    }
}
