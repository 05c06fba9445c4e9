use std::collections::BTreeSet;

use proptest::prelude::*;

use super::*;
use crate::text::Vocab;

#[test]
fn registry_is_deterministic_and_covers_layers() {
    let (a, la) = make_registry(0);
    let (b, lb) = make_registry(0);
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert_eq!(a.entities.len(), NUM_ENTITIES);
    let layers: BTreeSet<usize> = a.entities.iter().flat_map(|e| e.layers.clone()).collect();
    assert_eq!(layers, (0..NUM_LAYERS).collect());
    let names: BTreeSet<&str> = a.entities.iter().map(|e| e.name.as_str()).collect();
    assert_eq!(names.len(), NUM_ENTITIES);
}

#[test]
fn layer_map_is_inverse() {
    let (_, lm) = make_registry(3);
    for e in 0..NUM_ENTITIES {
        assert!(!lm.layers(e).is_empty());
        for &l in lm.layers(e) {
            assert!(lm.entities(l).contains(&e));
        }
    }
    for l in 0..NUM_LAYERS {
        for &e in lm.entities(l) {
            assert!(lm.layers(e).contains(&l));
        }
    }
    let covered: Vec<usize> = (0..NUM_LAYERS)
        .flat_map(LayerMap::slices_of_layer)
        .collect();
    assert_eq!(covered, (0..NUM_SLICES).collect::<Vec<_>>());
}

#[test]
fn vocabulary_size_is_pinned() {
    for seed in [0, 1, 99] {
        let (r, _) = make_registry(seed);
        let v = Vocab::from_registry(&r);
        assert_eq!(v.len(), 60);
    }
}

#[test]
fn zero_entity_sample_is_all_normal() {
    let (r, lm) = make_registry(0);
    let cfg = GeneratorConfig {
        max_entities: 0,
        mean_entities: 0.0,
    };
    let s = generate_sample_with(&r, &lm, 5, &cfg);
    assert!(s.present.is_empty() && s.masks.is_empty() && s.descriptions.is_empty());
    assert!(s.sentences.iter().all(|l| l.ends_with("is normal .")));
    assert!(s
        .slices
        .iter()
        .flat_map(|g| &g.data)
        .all(|&v| v <= BACKGROUND_MAX));
}

#[test]
fn golden_sample_seed_7() {
    let (r, lm) = make_registry(0);
    let s = generate_sample(&r, &lm, 7);
    assert_eq!(s, generate_sample(&r, &lm, 7));
    let mut h = crc32fast::Hasher::new();
    for g in &s.slices {
        h.update(&g.to_pgm());
    }
    for ((e, sl), m) in &s.masks {
        h.update(&[*e as u8, *sl as u8]);
        for r in m.to_runs() {
            h.update(&r.to_le_bytes());
        }
    }
    h.update(s.report().as_bytes());
    assert_eq!(
        (s.present.clone(), h.finalize()),
        (GOLDEN_PRESENT.to_vec(), GOLDEN_CRC)
    );
}

const GOLDEN_PRESENT: &[usize] = &[14, 20];
const GOLDEN_CRC: u32 = 3821573441;

#[test]
fn split_arithmetic() {
    let c = split_counts(100);
    assert_eq!((c.train, c.val, c.test), (70, 10, 20));
    let c = split_counts(10);
    assert_eq!((c.train, c.val, c.test), (7, 1, 2));
    let c = split_counts(600);
    assert_eq!((c.train, c.val, c.test), (420, 60, 120));
}

#[test]
fn dataset_persists_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(10, 4, dir.path()).unwrap();
    assert_eq!(m.samples.len(), 10);
    let ds = Dataset::open(dir.path()).unwrap();
    assert_eq!(ds.manifest, m);
    let (r, lm) = make_registry(4);
    assert_eq!(ds.vocab, Vocab::from_registry(&r));
    let seeds = sample_seeds(10, 4);
    for (i, e) in m.samples.iter().enumerate() {
        let mut expect = generate_sample(&r, &lm, seeds[i]);
        expect.sample_id = e.sample_id.clone();
        assert_eq!(ds.load(&e.sample_id).unwrap(), expect);
    }
    let ids: BTreeSet<&String> = m.splits.values().flatten().collect();
    assert_eq!(ids.len(), 10);
    assert!(generate_dataset(9, 4, dir.path()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn samples_respect_registry(seed in any::<u64>()) {
        let (r, lm) = make_registry(seed % 5);
        let s = generate_sample(&r, &lm, seed);
        prop_assert!(s.present.len() <= 6);
        for g in &s.slices {
            prop_assert!(g.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let report = s.report();
        for e in 0..NUM_ENTITIES {
            let spec = &r.entities[e];
            let has_mask = s.masks.keys().any(|&(me, _)| me == e);
            prop_assert_eq!(has_mask, report.contains(&spec.abnormal_sentence()));
        }
        for (&(e, sl), m) in &s.masks {
            prop_assert!(lm.slice_in_entity_layers(e, sl));
            prop_assert!(!m.is_empty());
            let (lo, hi) = r.entities[e].intensity_band;
            for (i, &b) in m.bits.iter().enumerate() {
                if b {
                    let v = s.slices[sl].data[i];
                    prop_assert!(v >= lo - 1.0 / 255.0 && v <= hi + 1.0 / 255.0);
                }
            }
        }
        for d in &s.descriptions {
            prop_assert!(r.entity_in(d).is_some());
        }
    }
}
