use std::path::Path;

use eyetrack::data::{load_manifest, DataError, EmbeddingCache, IterOptions, Split};
use eyetrack::blazegaze::{ArchConfig, BlazeGazeModel};
use eyetrack::simulator::{emit_dataset, SynthDatasetSpec};

fn small(dir: &Path) -> SynthDatasetSpec {
    let spec = SynthDatasetSpec::with_users(2, 1, 1, 3, 11);
    emit_dataset(dir, &spec).unwrap();
    spec
}

fn edit_manifest(dir: &Path, f: impl FnOnce(&mut serde_json::Value)) {
    let p = dir.join("manifest.json");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
    f(&mut v);
    std::fs::write(&p, serde_json::to_string(&v).unwrap()).unwrap();
}

#[test]
fn emitted_manifest_loads_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small(dir.path());
    let m = load_manifest(dir.path()).unwrap();
    assert!(m.skipped.is_empty());
    assert!(!m.intrinsics_defaulted);
    assert_eq!(m.samples.len(), 4 * 12);
    let opts = IterOptions::default();
    let all: Vec<_> = m.iter(&opts).collect();
    assert!(all.iter().all(|s| s.is_ok()));
    let (train, _) = m.split_samples(Split::Train, &opts);
    assert_eq!(train.len(), 2 * 12);
    // Labels survive the pixel round trip and poses come back metric.
    for s in &train {
        let t = s.truth.unwrap();
        assert!((s.gaze[0] - t.gaze[0]).abs() < 1e-9 && (s.gaze[1] - t.gaze[1]).abs() < 1e-9);
        assert!((s.pose.translation().z - t.translation[2]).abs() < 1.0);
        assert!(!s.blink);
    }
    assert_eq!(m.user_ids(), spec.users.iter().map(|u| u.id.clone()).collect::<Vec<_>>());
}

#[test]
fn iteration_sorted_by_user_then_time() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    edit_manifest(dir.path(), |v| {
        let s = v["samples"].as_array_mut().unwrap();
        s.reverse();
    });
    let m = load_manifest(dir.path()).unwrap();
    for w in m.samples.windows(2) {
        assert!((w[0].user_id.as_str(), w[0].timestamp) <= (w[1].user_id.as_str(), w[1].timestamp));
    }
}

#[test]
fn one_corrupted_sample_is_skipped() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    edit_manifest(dir.path(), |v| {
        v["samples"][5]["gaze_px"] = serde_json::json!("left");
    });
    let m = load_manifest(dir.path()).unwrap();
    assert_eq!(m.samples.len(), 47);
    assert_eq!(m.skipped.len(), 1);
    assert_eq!(m.skipped[0].index, 5);
    assert!(m.skipped[0].reason.contains("/samples/5/gaze_px"), "{}", m.skipped[0].reason);
}

#[test]
fn schema_error_carries_pointer() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    edit_manifest(dir.path(), |v| {
        v["screen"]["width_px"] = serde_json::json!(-4);
    });
    match load_manifest(dir.path()) {
        Err(DataError::Schema { pointer, .. }) => assert_eq!(pointer, "/screen/width_px"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn tampered_container_is_an_integrity_error() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    let p = dir.path().join("patches.eytc");
    let mut bytes = std::fs::read(&p).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&p, bytes).unwrap();
    assert!(matches!(load_manifest(dir.path()), Err(DataError::Integrity(_))));
}

#[test]
fn missing_intrinsics_use_recorded_default() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    edit_manifest(dir.path(), |v| {
        v.as_object_mut().unwrap().remove("intrinsics");
    });
    let m = load_manifest(dir.path()).unwrap();
    assert!(m.intrinsics_defaulted);
    assert_eq!(m.intrinsics, eyetrack::CameraIntrinsics::default_for_image(1280, 720));
}

#[test]
fn unsupported_version_rejected() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    edit_manifest(dir.path(), |v| v["version"] = serde_json::json!(9));
    assert!(matches!(load_manifest(dir.path()), Err(DataError::Version(9))));
}

#[test]
fn embedding_cache_invalidated_by_encoder_change() {
    let dir = tempfile::tempdir().unwrap();
    small(dir.path());
    let m = load_manifest(dir.path()).unwrap();
    let (mut samples, _) = m.split_samples(Split::Val, &IterOptions::default());
    let model = BlazeGazeModel::new(ArchConfig::reduced(), 1).unwrap();
    let cache = EmbeddingCache::build(&model, &samples).unwrap();
    let path = dir.path().join("emb.eytc");
    cache.save(&path).unwrap();
    let back = EmbeddingCache::load(&path, &model.encoder_hash()).unwrap().unwrap();
    assert_eq!(back, cache);
    assert_eq!(back.attach(&mut samples), 0);
    let other = BlazeGazeModel::new(ArchConfig::reduced(), 2).unwrap();
    assert!(EmbeddingCache::load(&path, &other.encoder_hash()).unwrap().is_none());
}
