use std::ffi::{CStr, CString};
use std::ptr;

use egomem::agent::generate_walkthrough;
use egomem::envmemory::{environment_feature, EnvMemoryModel, ModelConfig, PoseMode};
use egomem::localstate::{local_state_label, DirectionParams};
use egomem::observation::{egocentric_features, ObservationParams};
use egomem::worldgen::{generate_environment, EnvironmentSpec, GenParams};
use egomem_ffi::*;

fn env_handle(seed: u64) -> *mut EgmEnv {
    let mut e = ptr::null_mut();
    assert_eq!(unsafe { egm_env_generate(seed, &mut e) }, EgmStatus::EgmOk);
    assert!(!e.is_null());
    e
}

fn last_error() -> String {
    let p = egm_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

#[test]
fn env_json_round_trip_matches_rust() {
    let e = env_handle(11);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { egm_env_to_json(e, &mut s) }, EgmStatus::EgmOk);
    let json = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_string();
    let direct = generate_environment(11, &GenParams::default()).unwrap();
    assert_eq!(EnvironmentSpec::from_json(&json).unwrap(), direct);

    let mut e2 = ptr::null_mut();
    assert_eq!(unsafe { egm_env_from_json(s, &mut e2) }, EgmStatus::EgmOk);
    unsafe {
        egm_string_free(s);
        egm_env_free(e);
        egm_env_free(e2);
    }
}

#[test]
fn labels_and_features_match_rust() {
    let e = env_handle(12);
    let spec = generate_environment(12, &GenParams::default()).unwrap();
    let walk = generate_walkthrough(&spec, 5, 20).unwrap();
    let n = unsafe { egm_env_object_classes(e) };
    let fd = unsafe { egm_env_feature_dim(e) };
    assert_eq!(n, spec.n_object_classes());
    for p in &walk.poses {
        let mut label = vec![9u8; n];
        assert_eq!(unsafe { egm_local_state_label(e, p.x, p.z, p.heading, label.as_mut_ptr(), n) }, EgmStatus::EgmOk);
        assert_eq!(label, local_state_label(&spec, p, &DirectionParams::default()).entries());
        let mut f = vec![0f32; fd];
        assert_eq!(unsafe { egm_egocentric_features(e, p.x, p.z, p.heading, f.as_mut_ptr(), fd) }, EgmStatus::EgmOk);
        assert_eq!(f, egocentric_features(&spec, p, &ObservationParams::default()));
    }
    unsafe { egm_env_free(e) };
}

#[test]
fn errors_are_reported() {
    let e = env_handle(13);
    let mut small = [0u8; 2];
    assert_eq!(unsafe { egm_local_state_label(e, 1.0, 1.0, 0, small.as_mut_ptr(), 2) }, EgmStatus::EgmBufferTooSmall);
    assert!(last_error().contains("needs"));
    let mut label = [0u8; 16];
    assert_eq!(unsafe { egm_local_state_label(e, 1.0, 1.0, 12, label.as_mut_ptr(), 16) }, EgmStatus::EgmInvalidArgument);
    assert_eq!(unsafe { egm_local_state_label(ptr::null(), 1.0, 1.0, 0, label.as_mut_ptr(), 16) }, EgmStatus::EgmNullArgument);
    assert!(last_error().contains("env"));
    assert_eq!(unsafe { egm_env_generate(1, ptr::null_mut()) }, EgmStatus::EgmNullArgument);

    let bad = CString::new("{\"schema_version\": 99}").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { egm_env_from_json(bad.as_ptr(), &mut out) }, EgmStatus::EgmInvalidArgument);
    assert!(out.is_null());

    let missing = CString::new("/nonexistent/model.egm").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { egm_model_load(missing.as_ptr(), &mut m) }, EgmStatus::EgmIo);

    // success clears the message
    assert_eq!(unsafe { egm_local_state_label(e, 6.0, 6.0, 0, label.as_mut_ptr(), 16) }, EgmStatus::EgmOk);
    assert!(egm_last_error_message().is_null());
    unsafe {
        egm_env_free(e);
        egm_env_free(ptr::null_mut());
        egm_model_free(ptr::null_mut());
        egm_string_free(ptr::null_mut());
    }
}

#[test]
fn environment_feature_matches_rust() {
    let spec = generate_environment(14, &GenParams::default()).unwrap();
    let walk = generate_walkthrough(&spec, 3, 24).unwrap();
    let obs = ObservationParams::default();
    let feats: Vec<Vec<f32>> = walk.poses.iter().map(|p| egocentric_features(&spec, p, &obs)).collect();
    let mc = ModelConfig { d: 16, heads: 2, layers_enc: 1, layers_dec: 1, pose_embed: 8, feature_dim: feats[0].len(), n_classes: spec.n_object_classes(), ..ModelConfig::default() };
    let model = EnvMemoryModel::new(mc, 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.egm");
    model.save(&path, serde_json::Value::Null).unwrap();

    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { egm_model_load(cpath.as_ptr(), &mut m) }, EgmStatus::EgmOk);
    assert_eq!(unsafe { (egm_model_dim(m), egm_model_feature_dim(m)) }, (16, feats[0].len()));

    let flat: Vec<f32> = feats.concat();
    let poses: Vec<f64> = walk.poses.iter().flat_map(|p| p.to_triple()).collect();
    let mut h = vec![0f64; 16];
    let st = unsafe { egm_environment_feature(m, flat.as_ptr(), poses.as_ptr(), 24, 10, 8, h.as_mut_ptr(), h.len()) };
    assert_eq!(st, EgmStatus::EgmOk);
    let direct = environment_feature(&model, &feats, &walk.poses, 10, 8, PoseMode::Relative).unwrap();
    assert_eq!(h, direct.h);

    let st = unsafe { egm_environment_feature(m, flat.as_ptr(), poses.as_ptr(), 24, 24, 8, h.as_mut_ptr(), h.len()) };
    assert_eq!(st, EgmStatus::EgmInvalidArgument);
    unsafe { egm_model_free(m) };
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(egm_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
