use std::collections::BTreeMap;
use std::fs;

use unoise::data::*;
use unoise::eval::dice;
use unoise::Error;

fn sample_ids(d: &Dataset) -> Vec<String> {
    let mut ids: Vec<String> = d.samples.iter().map(|s| s.id.clone()).collect();
    ids.sort();
    ids
}

#[test]
fn without_distractors_an_intensity_threshold_recovers_the_mask() {
    let spec = SyntheticTaskSpec {
        n_distractors: 0,
        noise_level: 0.0,
        ..Default::default()
    };
    let cut = (spec.landmark_intensity + spec.blob_intensity) / 2.0;
    for s in &generate_synthetic(&spec, 20, 3).unwrap().samples {
        let pred: Vec<u8> = s.image.data().iter().map(|&v| (v > cut) as u8).collect();
        assert_eq!(dice(&pred, s.mask.labels()).unwrap(), 1.0);
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = SyntheticTaskSpec::default();
    let a = generate_synthetic(&spec, 16, 11).unwrap();
    let b = generate_synthetic(&spec, 16, 11).unwrap();
    assert_eq!(a, b);
    let bits = |d: &Dataset| -> Vec<u32> { d.samples.iter().flat_map(|s| s.image.data().iter().map(|v| v.to_bits())).collect() };
    assert_eq!(bits(&a), bits(&b));
    assert_ne!(a, generate_synthetic(&spec, 16, 12).unwrap());
}

fn components(mask: &Mask) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (mask.height(), mask.width());
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || mask.labels()[start] != 1 {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut comp = Vec::new();
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            comp.push((y, x));
            let mut push = |q: usize| {
                if !seen[q] && mask.labels()[q] == 1 {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
        }
        out.push(comp);
    }
    out
}

#[test]
fn exactly_one_target_region_matching_its_box() {
    for s in &generate_synthetic(&SyntheticTaskSpec::default(), 100, 5).unwrap().samples {
        let comps = components(&s.mask);
        assert_eq!(comps.len(), 1, "sample {}", s.id);
        let meta = s.meta.as_ref().unwrap();
        let c = &comps[0];
        let bbox = BBox {
            top: c.iter().map(|p| p.0).min().unwrap(),
            left: c.iter().map(|p| p.1).min().unwrap(),
            bottom: c.iter().map(|p| p.0).max().unwrap() + 1,
            right: c.iter().map(|p| p.1).max().unwrap() + 1,
        };
        assert_eq!(bbox, meta.target);
        assert!(!meta.target.near(&meta.landmark, 0));
        assert_eq!(meta.distractors.len(), 3);
        assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

/// Accuracy (= expected dice, since discs are disjoint and equally sized)
/// of landmark-blind rules that see only the blob centres.
#[test]
fn landmark_blind_rules_do_little_better_than_chance() {
    let spec = SyntheticTaskSpec::default();
    let data = generate_synthetic(&spec, 500, 2024).unwrap();
    let centre = |b: &BBox| ((b.top + b.bottom) as f64 / 2.0, (b.left + b.right) as f64 / 2.0);
    let mid = spec.image_size as f64 / 2.0;

    type Scorer = Box<dyn Fn(f64, f64) -> f64>;
    let scorers: Vec<(&str, Scorer)> = vec![
        ("top", Box::new(|y, _| -y)),
        ("bottom", Box::new(|y, _| y)),
        ("left", Box::new(|_, x| -x)),
        ("right", Box::new(|_, x| x)),
        ("central", Box::new(move |y, x| -((y - mid).powi(2) + (x - mid).powi(2)))),
        ("peripheral", Box::new(move |y, x| (y - mid).powi(2) + (x - mid).powi(2))),
    ];
    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for (name, f) in &scorers {
        let hits = data
            .samples
            .iter()
            .filter(|s| {
                let m = s.meta.as_ref().unwrap();
                let (ty, tx) = centre(&m.target);
                m.distractors.iter().all(|d| {
                    let (y, x) = centre(d);
                    f(ty, tx) > f(y, x)
                })
            })
            .count();
        scores.insert(name.to_string(), hits as f64 / data.len() as f64);
    }

    // Best rule that uses the placement constraint: a blob whose implied
    // landmark would collide with another blob cannot be the target; pick
    // uniformly among the remaining candidates.
    let landmark_of = |b: &BBox| -> Option<BBox> {
        let (cy, cx) = (b.top as isize + spec.blob_radius as isize, b.left as isize + spec.blob_radius as isize);
        let (ly, lx) = (cy - spec.offset.0, cx - spec.offset.1);
        let half = (spec.landmark_size / 2) as isize;
        let (t, l) = (ly - half, lx - half);
        let s = spec.landmark_size as isize;
        let n = spec.image_size as isize;
        (t >= 0 && l >= 0 && t + s <= n && l + s <= n).then(|| BBox {
            top: t as usize,
            left: l as usize,
            bottom: (t + s) as usize,
            right: (l + s) as usize,
        })
    };
    let mut expected = 0.0;
    for s in &data.samples {
        let m = s.meta.as_ref().unwrap();
        let blobs: Vec<BBox> = std::iter::once(m.target).chain(m.distractors.iter().copied()).collect();
        let candidates: Vec<usize> = (0..blobs.len())
            .filter(|&i| match landmark_of(&blobs[i]) {
                None => false,
                Some(lm) => blobs.iter().enumerate().all(|(j, b)| j == i || !b.near(&lm, spec.gap)),
            })
            .collect();
        assert!(candidates.contains(&0));
        expected += 1.0 / candidates.len() as f64;
    }
    scores.insert("consistent".into(), expected / data.len() as f64);

    let chance = 1.0 / (1.0 + spec.n_distractors as f64);
    for (name, acc) in &scores {
        assert!(*acc <= chance + 0.1, "rule {name} reaches {acc}");
    }
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&SyntheticTaskSpec::default(), 6, 1).unwrap();
    let manifest = save_dataset(&data, dir.path().join("d")).unwrap();
    let back = load_dataset(&manifest).unwrap();
    assert_eq!(back, data);
    // Saving again over the same directory replaces it.
    let other = generate_synthetic(&SyntheticTaskSpec::default(), 3, 2).unwrap();
    let manifest = save_dataset(&other, dir.path().join("d")).unwrap();
    assert_eq!(load_dataset(&manifest).unwrap(), other);
    assert_eq!(fs::read_dir(dir.path().join("d/images")).unwrap().count(), 3);
}

#[test]
fn missing_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_synthetic(&SyntheticTaskSpec::default(), 2, 1).unwrap();
    let manifest = save_dataset(&data, dir.path().join("d")).unwrap();
    let gone = dir.path().join("d/masks/0001.u8");
    fs::remove_file(&gone).unwrap();
    match load_dataset(&manifest) {
        Err(Error::MissingFile { path }) => assert_eq!(path, gone),
        other => panic!("expected a missing-file error, got {other:?}"),
    }
    assert!(matches!(
        load_dataset(dir.path().join("nowhere/manifest.json")),
        Err(Error::MissingFile { .. })
    ));
}

fn write_raw(dir: &std::path::Path, pixels: &[f32], labels: &[u8], window: [f64; 2], h: usize, w: usize) {
    fs::create_dir_all(dir.join("images")).unwrap();
    fs::create_dir_all(dir.join("masks")).unwrap();
    let bytes: Vec<u8> = pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join("images/a.f32"), bytes).unwrap();
    fs::write(dir.join("masks/a.u8"), labels).unwrap();
    let manifest = serde_json::json!({
        "version": 1,
        "class_names": ["background", "target"],
        "normalization": {"window": window},
        "samples": [{"id": "a", "image": "images/a.f32", "mask": "masks/a.u8", "shape": [1, h, w]}],
    });
    fs::write(dir.join("manifest.json"), serde_json::to_vec(&manifest).unwrap()).unwrap();
}

#[test]
fn intensity_window_matches_affine_clamp_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (h, w) = (8, 8);
    let raw: Vec<f32> = (0..h * w).map(|i| -1000.0 + 4000.0 * i as f32 / (h * w - 1) as f32).collect();
    write_raw(dir.path(), &raw, &vec![0; h * w], [-100.0, 240.0], h, w);
    let d = load_dataset(dir.path().join("manifest.json")).unwrap();
    let oracle = |v: f32| -> f32 {
        let v = v as f64;
        if v <= -100.0 {
            0.0
        } else if v >= 240.0 {
            1.0
        } else {
            ((v + 100.0) / 340.0) as f32
        }
    };
    for (got, &v) in d.samples[0].image.data().iter().zip(&raw) {
        assert!((got - oracle(v)).abs() <= 1e-7, "{v} -> {got}");
    }
    assert!(d.samples[0].image.data().contains(&0.0));
    assert!(d.samples[0].image.data().contains(&1.0));
}

#[test]
fn bad_labels_and_sizes_are_distinct_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut labels = vec![0u8; 16];
    labels[5] = 2;
    write_raw(dir.path(), &[0.5; 16], &labels, [0.0, 1.0], 4, 4);
    assert!(matches!(
        load_dataset(dir.path().join("manifest.json")),
        Err(Error::InvalidLabel { label: 2, .. })
    ));
    write_raw(dir.path(), &[0.5; 15], &[0; 16], [0.0, 1.0], 4, 4);
    assert!(matches!(load_dataset(dir.path().join("manifest.json")), Err(Error::Shape(_))));
}

#[test]
fn split_examples() {
    let data = generate_synthetic(&SyntheticTaskSpec::default(), 10, 0).unwrap();
    let (a, b) = split(&data, 0.8, 4).unwrap();
    assert_eq!((a.len(), b.len()), (8, 2));
    let (a2, b2) = split(&data, 0.8, 4).unwrap();
    assert_eq!((sample_ids(&a), sample_ids(&b)), (sample_ids(&a2), sample_ids(&b2)));
    let mut union: Vec<String> = sample_ids(&a).into_iter().chain(sample_ids(&b)).collect();
    union.sort();
    assert_eq!(union, sample_ids(&data));
    assert!(split(&data, 1.0, 0).is_err());
    assert!(split(&data, 0.01, 0).is_err());
}
