mod common;

use geoprompt::dataset::{self, LuminanceProxy, ManifestRecord, Split, SplitManifest, SynthConfig};
use geoprompt::Error;

#[test]
fn full_size_manifest_loads_with_exact_counts() {
    let m = common::full_size_manifest().unwrap();
    let c = m.counts();
    assert_eq!((c[&Split::Train], c[&Split::Val], c[&Split::Test]), (921, 122, 109));
    let again = SplitManifest::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(again, m);
}

#[test]
fn shared_patient_is_rejected() {
    let mut recs = common::records([10, 5, 5]);
    let test_patient = recs.iter().find(|r| r.split == Split::Test).unwrap().patient_id.clone();
    recs[0].patient_id = test_patient;
    assert!(matches!(SplitManifest::new(recs.clone()), Err(Error::Schema(_))));
    let json = serde_json::to_string(&recs).unwrap();
    assert!(matches!(SplitManifest::from_json(&json), Err(Error::Schema(_))));
}

#[test]
fn bad_flags_and_duplicates_are_rejected() {
    let mut recs = common::records([4, 1, 1]);
    recs[1].flags = vec!["x".into()];
    assert!(matches!(SplitManifest::new(recs), Err(Error::Schema(_))));
    let mut recs = common::records([4, 1, 1]);
    recs[1].frame_id = recs[0].frame_id.clone();
    assert!(matches!(SplitManifest::new(recs), Err(Error::Schema(_))));
}

#[test]
fn flag_order_does_not_matter() {
    let r = ManifestRecord { frame_id: "a".into(), patient_id: "p".into(), split: Split::Train, flags: vec!["r".into(), "s".into()] };
    assert_eq!(r.present(), [true, false, true]);
}

#[test]
fn written_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { count: 6, resolution: 64, ..SynthConfig::default() };
    let frames: Vec<_> = (0..6)
        .map(|i| {
            let mut f = dataset::generate_synthetic(&cfg, i).unwrap();
            let split = [Split::Train, Split::Train, Split::Train, Split::Val, Split::Test, Split::Test][i];
            f.patient_id = format!("{split}-p");
            (f, split)
        })
        .collect();
    let manifest = dataset::write_dataset(dir.path(), &frames).unwrap();
    assert_eq!(manifest.counts()[&Split::Train], 3);
    let loaded = dataset::load_l3d(dir.path(), &manifest, Split::Test, &LuminanceProxy::default()).unwrap();
    assert_eq!(loaded.len(), 2);
    for (got, (want, _)) in loaded.iter().zip(&frames[4..]) {
        assert_eq!(got.frame_id, want.frame_id);
        assert_eq!(got.present, want.present);
        assert_eq!(got.masks, want.masks);
        assert!(got.rgb.iter().zip(want.rgb.iter()).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    }
}

#[test]
fn missing_image_is_an_ingestion_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { count: 1, resolution: 64, ..SynthConfig::default() };
    let f = dataset::generate_synthetic(&cfg, 0).unwrap();
    let manifest = dataset::write_dataset(dir.path(), &[(f, Split::Train)]).unwrap();
    for entry in std::fs::read_dir(dir.path().join("images")).unwrap() {
        std::fs::remove_file(entry.unwrap().path()).unwrap();
    }
    let err = dataset::load_l3d(dir.path(), &manifest, Split::Train, &LuminanceProxy::default()).unwrap_err();
    assert!(matches!(err, Error::Ingestion { .. }), "{err}");
}
