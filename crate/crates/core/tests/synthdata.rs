use uhr_core::imgeo::connected_components;
use uhr_core::synthdata::{
    generate_scene, generate_split, read_dataset, scene_rng, write_dataset, write_manifest,
    DatasetManifest, SceneSpec, Split,
};
use uhr_core::Error;

#[test]
fn mask_fraction_stays_in_range_over_1000_scenes() {
    let spec = SceneSpec::default();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..1000 {
        let s = generate_scene(&spec, &mut scene_rng(11, Split::Train, i)).unwrap();
        let frac = s.mask.count() as f64 / (64.0 * 64.0);
        lo = lo.min(frac);
        hi = hi.max(frac);
        let comps = connected_components(&s.mask);
        assert!(comps.iter().any(|c| c.area() >= 4), "scene {i} has no usable lesion");
    }
    assert!(lo >= 0.005 && hi <= 0.30, "mask fraction range [{lo}, {hi}]");
}

#[test]
fn single_lesion_without_distractors_is_one_component() {
    let spec = SceneSpec {
        lesions: (1, 1),
        distractors: (0, 0),
        ..Default::default()
    };
    for i in 0..50 {
        let s = generate_scene(&spec, &mut scene_rng(4, Split::Val, i)).unwrap();
        assert_eq!(connected_components(&s.mask).len(), 1);
    }
}

#[test]
fn generation_is_deterministic() {
    let a = generate_split(&SceneSpec::default(), 9, Split::Train, 5).unwrap();
    let b = generate_split(&SceneSpec::default(), 9, Split::Train, 5).unwrap();
    assert_eq!(a, b);
}

#[test]
fn distractors_stay_out_of_the_mask() {
    let with = SceneSpec {
        distractors: (3, 3),
        ..Default::default()
    };
    let without = SceneSpec {
        distractor_contrast: 0.0,
        ..with.clone()
    };
    // identical draws, so only the distractor intensity differs
    for i in 0..100 {
        let a = generate_scene(&with, &mut scene_rng(1, Split::Train, i)).unwrap();
        let b = generate_scene(&without, &mut scene_rng(1, Split::Train, i)).unwrap();
        assert_eq!(a.mask, b.mask);
    }
}

#[test]
fn dataset_round_trip_is_lossless() {
    let dir = tempfile::tempdir().unwrap();
    let train = generate_split(&SceneSpec::default(), 2, Split::Train, 3).unwrap();
    let val = generate_split(&SceneSpec::default(), 2, Split::Val, 2).unwrap();
    write_dataset(dir.path(), &[("train", &train), ("val", &val)], &["seed = 2".into()]).unwrap();
    let (m, back) = read_dataset(dir.path(), Some("train")).unwrap();
    assert_eq!(back, train);
    assert_eq!(m.entries.len(), 5);
    assert_eq!(m.notes, vec!["seed = 2".to_string()]);
    let (_, back) = read_dataset(dir.path(), Some("val")).unwrap();
    assert_eq!(back, val);
}

#[test]
fn missing_mask_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let train = generate_split(&SceneSpec::default(), 2, Split::Train, 1).unwrap();
    let m = write_dataset(dir.path(), &[("train", &train)], &[]).unwrap();
    let gone = dir.path().join(&m.entries[0].mask);
    std::fs::remove_file(&gone).unwrap();
    match read_dataset(dir.path(), None) {
        Err(Error::MissingFile(p)) => assert_eq!(p, gone),
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_manifest_is_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    write_manifest(dir.path(), &DatasetManifest::default()).unwrap();
    let (m, s) = read_dataset(dir.path(), None).unwrap();
    assert!(m.entries.is_empty() && s.is_empty());
}

#[test]
fn malformed_image_reports_byte_offset() {
    let dir = tempfile::tempdir().unwrap();
    let train = generate_split(&SceneSpec::default(), 2, Split::Train, 1).unwrap();
    let m = write_dataset(dir.path(), &[("train", &train)], &[]).unwrap();
    std::fs::write(dir.path().join(&m.entries[0].image), b"P5\n64 x\n").unwrap();
    match read_dataset(dir.path(), None) {
        Err(Error::Parse { offset, .. }) => assert_eq!(offset, 6),
        other => panic!("{other:?}"),
    }
}
