use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use proptest::prelude::*;
use prototransfer::augment::{AugmentationPipeline, Image, Transform};
use prototransfer::data::{
    load_directory_dataset, make_synthetic_dataset, render_template, restrict, sample_episode, sample_pretrain_batch,
    BatchSampler, Dataset, Provenance, Split, SyntheticSpec,
};
use prototransfer::{rng, Error};

/// `classes` classes of `per_class` 1x1 images whose pixel encodes the sample id.
fn tagged(classes: usize, per_class: usize) -> Dataset {
    let n = classes * per_class;
    let images = (0..n)
        .map(|i| Image::new(1, 1, 1, vec![i as f32 / n as f32]).unwrap())
        .collect();
    let labels = (0..n).map(|i| i / per_class).collect();
    let names = (0..classes).map(|c| format!("c{c:03}")).collect();
    Dataset::new(images, Some(labels), names, Split::Train, Provenance::InMemory).unwrap()
}

fn sample_id(ds: &Dataset, i: usize, total: usize) -> usize {
    (ds.image(i).data[0] * total as f32).round() as usize
}

#[test]
fn restrict_to_everything_is_identity() {
    let ds = tagged(6, 4);
    let r = restrict(&ds, Some(6), Some(24), 1).unwrap();
    assert_eq!(r.len(), 24);
    let ids: HashSet<usize> = (0..24).map(|i| sample_id(&r, i, 24)).collect();
    assert_eq!(ids.len(), 24);
    assert_eq!(r.class_names(), ds.class_names());
}

#[test]
fn restrict_classes_keeps_whole_classes() {
    let ds = tagged(64, 10);
    let r = restrict(&ds, Some(2), None, 3).unwrap();
    assert_eq!(r.n_classes(), 2);
    assert_eq!(r.len(), 20);
    for c in 0..2 {
        assert_eq!(r.class_samples(c).len(), 10);
    }
}

#[test]
fn restrict_images_spreads_removals_across_classes() {
    let ds = tagged(64, 600);
    let r = restrict(&ds, None, Some(1200), 5).unwrap();
    assert_eq!(r.len(), 1200);
    // Hypergeometric per-class count: mean 18.75, sd about 4.2.
    let mut counts: HashMap<usize, usize> = HashMap::new();
    for i in 0..r.len() {
        *counts.entry(sample_id(&r, i, 64 * 600) / 600).or_default() += 1;
    }
    for c in 0..64 {
        let k = counts.get(&c).copied().unwrap_or(0) as f64;
        assert!((k - 18.75).abs() <= 5.0 * 4.2, "class {c}: {k}");
    }
}

#[test]
fn restrict_rejects_over_restriction() {
    let ds = tagged(4, 3);
    assert!(matches!(restrict(&ds, Some(5), None, 0), Err(Error::Contract { .. })));
    assert!(matches!(restrict(&ds, None, Some(13), 0), Err(Error::Contract { .. })));
    assert!(matches!(restrict(&ds, Some(2), Some(7), 0), Err(Error::Contract { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn restrict_classes_then_images(seed in any::<u64>(), k in 1usize..8, m in 1usize..30) {
        let ds = tagged(8, 5);
        let m = m.min(5 * k);
        let both = restrict(&ds, Some(k), Some(m), seed).unwrap();
        let classes_only = restrict(&ds, Some(k), None, seed).unwrap();
        prop_assert_eq!(both.len(), m);
        let allowed: HashSet<&String> = classes_only.class_names().iter().collect();
        prop_assert!(both.class_names().iter().all(|n| allowed.contains(n)));
        let ids: HashSet<usize> = (0..m).map(|i| sample_id(&both, i, 40)).collect();
        prop_assert_eq!(ids.len(), m);
    }

    #[test]
    fn episodes_have_disjoint_support_and_query(seed in any::<u64>(), n in 2usize..6, k in 1usize..4, q in 1usize..4) {
        let ds = tagged(8, 7);
        let ep = sample_episode(&ds, n, k, q, &mut rng::stream(seed, &[0])).unwrap();
        let support: HashSet<usize> = ep.support.iter().copied().collect();
        prop_assert_eq!(support.len(), n * k);
        prop_assert_eq!(ep.query.len(), n * q);
        prop_assert!(ep.query.iter().all(|i| !support.contains(i)));
        let labels = ds.labels().unwrap();
        for (way, &class) in ep.classes.iter().enumerate() {
            prop_assert_eq!(ep.support_labels.iter().filter(|&&l| l == way).count(), k);
            prop_assert_eq!(ep.query_labels.iter().filter(|&&l| l == way).count(), q);
            for (&id, &l) in ep.support.iter().zip(&ep.support_labels).chain(ep.query.iter().zip(&ep.query_labels)) {
                if l == way {
                    prop_assert_eq!(labels[id], class);
                }
            }
        }
    }

    #[test]
    fn pretrain_batches_are_distinct_within_a_batch(seed in any::<u64>(), n in 2usize..40, iteration in 0u64..1000) {
        let mut s = BatchSampler::new(40, n, seed, false).unwrap();
        let ids = s.next_ids(iteration);
        prop_assert_eq!(ids.len(), n);
        prop_assert_eq!(ids.iter().collect::<HashSet<_>>().len(), n);
        prop_assert_eq!(ids, BatchSampler::new(40, n, seed, false).unwrap().next_ids(iteration));
    }
}

#[test]
fn exact_fit_episode_uses_every_sample() {
    let ds = tagged(5, 4);
    let ep = sample_episode(&ds, 5, 1, 3, &mut rng::stream(2, &[0])).unwrap();
    let all: HashSet<usize> = ep.support.iter().chain(&ep.query).copied().collect();
    assert_eq!(all.len(), 20);
}

#[test]
fn episode_deficits_are_reported() {
    let ds = tagged(4, 3);
    let err = sample_episode(&ds, 5, 1, 1, &mut rng::stream(0, &[0])).unwrap_err();
    assert!(err.to_string().contains('5') && err.to_string().contains('4'), "{err}");
    assert!(sample_episode(&ds, 2, 2, 2, &mut rng::stream(0, &[0])).is_err());
}

#[test]
fn classes_appear_at_the_hypergeometric_rate() {
    let ds = tagged(20, 20);
    let mut counts = [0usize; 20];
    let mut r = rng::stream(17, &[4]);
    for _ in 0..600 {
        for c in sample_episode(&ds, 5, 1, 15, &mut r).unwrap().classes {
            counts[c] += 1;
        }
    }
    for (c, &k) in counts.iter().enumerate() {
        let f = k as f64 / 600.0;
        assert!((f - 0.25).abs() <= 0.05, "class {c}: {f}");
    }
}

#[test]
fn full_batch_is_a_permutation() {
    let ds = tagged(3, 4);
    let pipe = AugmentationPipeline {
        channels: 1,
        size: 1,
        transforms: vec![],
    };
    let b = sample_pretrain_batch(&ds, 12, 1, &pipe, 0, 0).unwrap();
    let mut ids = b.ids.clone();
    ids.sort_unstable();
    assert_eq!(ids, (0..12).collect::<Vec<_>>());
    assert!(sample_pretrain_batch(&ds, 13, 1, &pipe, 0, 0).is_err());
    assert!(sample_pretrain_batch(&ds, 4, 0, &pipe, 0, 0).is_err());
}

#[test]
fn erased_views_differ_from_their_prototypes() {
    let images = (0..10).map(|_| Image::filled(1, 16, 16, 1.0)).collect();
    let ds = Dataset::new(images, None, vec![], Split::Train, Provenance::InMemory).unwrap();
    let pipe = AugmentationPipeline {
        channels: 1,
        size: 16,
        transforms: vec![Transform::RandomErasing {
            p: 1.0,
            scale: (0.02, 0.33),
            ratio: (0.3, 3.3),
        }],
    };
    let b = sample_pretrain_batch(&ds, 10, 3, &pipe, 4, 0).unwrap();
    assert_eq!(b.queries.len(), 30);
    for i in 0..10 {
        assert!(b.prototypes[i].data.iter().all(|&v| v == 1.0));
        for q in 0..3 {
            let min = b.query(i, q).data.iter().copied().fold(f32::INFINITY, f32::min);
            assert_eq!(min, 0.0, "view ({i}, {q})");
        }
    }
}

#[test]
fn synthetic_data_is_reproducible_and_template_separable() {
    let spec = SyntheticSpec {
        n_classes: 12,
        n_per_class: 4,
        noise_std: 0.0,
        ..Default::default()
    };
    let a = make_synthetic_dataset(&spec).unwrap();
    let b = make_synthetic_dataset(&spec).unwrap();
    assert_eq!(a.images(), b.images());
    let templates: Vec<Image> = (0..12).map(|t| render_template(t, 16, 1, spec.seed)).collect();
    let labels = a.labels().unwrap();
    for (i, img) in a.images().iter().enumerate() {
        let d = |t: &Image| t.data.iter().zip(&img.data).map(|(x, y)| (x - y).powi(2)).sum::<f32>();
        let best = (0..12).min_by(|&x, &y| d(&templates[x]).total_cmp(&d(&templates[y]))).unwrap();
        assert_eq!(best, labels[i]);
        assert_eq!(img, &a.images()[a.class_samples(labels[i])[0]]);
    }
    let noisy = make_synthetic_dataset(&SyntheticSpec { noise_std: 0.1, ..spec.clone() }).unwrap();
    assert!(noisy.images().iter().all(|i| i.in_unit_range()));
}

fn write_pgm(path: &Path, w: usize, h: usize, pixels: &[u8]) {
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).unwrap();
}

#[test]
fn directory_loader_sorts_classes_and_scales_pixels() {
    let dir = tempfile::tempdir().unwrap();
    // Created out of lexicographic order.
    for (class, value) in [("zeta", 255u8), ("alpha", 0u8)] {
        let c = dir.path().join(class);
        fs::create_dir(&c).unwrap();
        for s in 0..3 {
            write_pgm(&c.join(format!("{s}.pgm")), 2, 2, &[value; 4]);
        }
    }
    let ds = load_directory_dataset(dir.path(), 2, 1).unwrap();
    assert_eq!(ds.len(), 6);
    assert_eq!(ds.class_names(), ["alpha", "zeta"]);
    let zeta = ds.class_samples(1)[0];
    assert!(ds.image(zeta).data.iter().all(|&v| v == 1.0));
    assert!(ds.image(ds.class_samples(0)[0]).data.iter().all(|&v| v == 0.0));
}

#[test]
fn directory_loader_errors() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("a");
    fs::create_dir(&c).unwrap();
    let empty = dir.path().join("b");
    fs::create_dir(&empty).unwrap();
    write_pgm(&c.join("0.pgm"), 2, 2, &[1; 4]);
    assert!(matches!(load_directory_dataset(dir.path(), 2, 1), Err(Error::Load { .. })));

    write_pgm(&empty.join("0.pgm"), 3, 3, &[1; 9]);
    let err = load_directory_dataset(dir.path(), 2, 1).unwrap_err();
    assert!(err.to_string().contains("mixed geometries"), "{err}");

    fs::write(empty.join("0.pgm"), b"P5\n2 2\n255\n\x01").unwrap();
    assert!(matches!(load_directory_dataset(dir.path(), 2, 1), Err(Error::Load { .. })));
}
