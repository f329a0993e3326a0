//! Exercises the C ABI end to end: handle lifecycle, the
//! generate/train/eval path, file round trips, and error reporting.

use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use tpn_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

unsafe fn msg() -> String {
    unsafe { CStr::from_ptr(tpn_last_error()) }.to_str().unwrap().to_string()
}

fn tmp_path(tag: &str) -> PathBuf {
    std::env::temp_dir().join(format!("tpn-ffi-{}-{tag}", std::process::id()))
}

unsafe fn generate(classes: usize, seed: u64) -> *mut TpnDataset {
    let kind = cstr("gaussian-blobs");
    let mut ds: *mut TpnDataset = ptr::null_mut();
    let status = unsafe { tpn_dataset_generate(kind.as_ptr(), classes, 30, 2, 0.8, seed, &mut ds) };
    assert_eq!(status, TpnStatus::Ok, "{}", unsafe { msg() });
    assert!(!ds.is_null());
    ds
}

const TINY_CONFIG: &str = "n_way = 3\nk_train = 1\nt_query = 9\n\
                           embedding = mlp:2:8:4\nmax_episodes = 40\n";

#[test]
fn version_is_the_package_version() {
    let v = unsafe { CStr::from_ptr(tpn_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn generate_train_eval_round_trip() {
    unsafe {
        let ds = generate(10, 23);

        let mut count = 0usize;
        assert_eq!(tpn_dataset_class_count(ds, &mut count), TpnStatus::Ok);
        assert_eq!(count, 10);
        let mut len = 0usize;
        assert_eq!(tpn_dataset_example_len(ds, &mut len), TpnStatus::Ok);
        assert_eq!(len, 2);

        let train_split = cstr("train");
        let mut train_ds: *mut TpnDataset = ptr::null_mut();
        assert_eq!(tpn_dataset_restrict(ds, train_split.as_ptr(), &mut train_ds), TpnStatus::Ok);
        let mut train_count = 0usize;
        assert_eq!(tpn_dataset_class_count(train_ds, &mut train_count), TpnStatus::Ok);
        assert_eq!(train_count, 6);

        let all = cstr("all");
        let config = cstr(TINY_CONFIG);
        let mut ck: *mut TpnCheckpoint = ptr::null_mut();
        assert_eq!(
            tpn_train(train_ds, all.as_ptr(), config.as_ptr(), &mut ck),
            TpnStatus::Ok,
            "{}",
            msg()
        );

        let mut episodes = 0u64;
        assert_eq!(tpn_checkpoint_episodes(ck, &mut episodes), TpnStatus::Ok);
        assert_eq!(episodes, 40);
        let mut params = 0usize;
        assert_eq!(tpn_checkpoint_param_count(ck, &mut params), TpnStatus::Ok);
        assert!(params > 0);

        let mut text: *mut c_char = ptr::null_mut();
        assert_eq!(tpn_checkpoint_config(ck, &mut text), TpnStatus::Ok);
        let config_text = CStr::from_ptr(text).to_str().unwrap().to_string();
        assert!(config_text.contains("n_way = 3"));
        assert!(config_text.contains("embedding = mlp:2:8:4"));
        tpn_string_free(text);

        let mut mean = f64::NAN;
        let mut ci = f64::NAN;
        assert_eq!(
            tpn_eval(ck, ds, 3, 1, 15, 50, 7, &mut mean, &mut ci),
            TpnStatus::Ok,
            "{}",
            msg()
        );
        assert!((0.0..=1.0).contains(&mean), "mean {mean} out of range");
        assert!(ci >= 0.0);

        let mut mean2 = f64::NAN;
        let mut ci2 = f64::NAN;
        assert_eq!(tpn_eval(ck, ds, 3, 1, 15, 50, 7, &mut mean2, &mut ci2), TpnStatus::Ok);
        assert_eq!(mean.to_bits(), mean2.to_bits());
        assert_eq!(ci.to_bits(), ci2.to_bits());

        tpn_checkpoint_free(ck);
        tpn_dataset_free(train_ds);
        tpn_dataset_free(ds);
    }
}

#[test]
fn files_round_trip_through_the_boundary() {
    unsafe {
        let ds = generate(5, 11);
        let ds_path = tmp_path("roundtrip.fsds");
        let ds_cpath = cstr(ds_path.to_str().unwrap());
        assert_eq!(tpn_dataset_save(ds, ds_cpath.as_ptr()), TpnStatus::Ok, "{}", msg());

        let mut reloaded: *mut TpnDataset = ptr::null_mut();
        assert_eq!(tpn_dataset_load(ds_cpath.as_ptr(), &mut reloaded), TpnStatus::Ok);
        let mut count = 0usize;
        assert_eq!(tpn_dataset_class_count(reloaded, &mut count), TpnStatus::Ok);
        assert_eq!(count, 5);

        let all = cstr("all");
        let config = cstr(TINY_CONFIG);
        let mut ck: *mut TpnCheckpoint = ptr::null_mut();
        assert_eq!(
            tpn_train(ds, all.as_ptr(), config.as_ptr(), &mut ck),
            TpnStatus::Ok,
            "{}",
            msg()
        );
        let ck_path = tmp_path("roundtrip.ckpt");
        let ck_cpath = cstr(ck_path.to_str().unwrap());
        assert_eq!(tpn_checkpoint_save(ck, ck_cpath.as_ptr()), TpnStatus::Ok, "{}", msg());

        let mut ck2: *mut TpnCheckpoint = ptr::null_mut();
        assert_eq!(tpn_checkpoint_load(ck_cpath.as_ptr(), &mut ck2), TpnStatus::Ok);
        let mut e1 = 0u64;
        let mut e2 = 1u64;
        assert_eq!(tpn_checkpoint_episodes(ck, &mut e1), TpnStatus::Ok);
        assert_eq!(tpn_checkpoint_episodes(ck2, &mut e2), TpnStatus::Ok);
        assert_eq!(e1, e2);

        let mut mean1 = f64::NAN;
        let mut mean2 = f64::NAN;
        let mut ci = f64::NAN;
        assert_eq!(tpn_eval(ck, reloaded, 3, 1, 15, 30, 5, &mut mean1, &mut ci), TpnStatus::Ok);
        assert_eq!(tpn_eval(ck2, reloaded, 3, 1, 15, 30, 5, &mut mean2, &mut ci), TpnStatus::Ok);
        assert_eq!(mean1.to_bits(), mean2.to_bits());

        tpn_checkpoint_free(ck2);
        tpn_checkpoint_free(ck);
        tpn_dataset_free(reloaded);
        tpn_dataset_free(ds);
        for p in [&ds_path, &ds_path.with_extension("split"), &ck_path] {
            let _ = std::fs::remove_file(p);
        }
    }
}

#[test]
fn errors_carry_status_and_message() {
    unsafe {
        let mut ds: *mut TpnDataset = ptr::null_mut();

        let bogus = cstr("mystery");
        assert_eq!(
            tpn_dataset_generate(bogus.as_ptr(), 5, 30, 2, 0.8, 0, &mut ds),
            TpnStatus::InvalidArgument
        );
        assert!(msg().contains("mystery"), "message was {:?}", msg());
        assert!(ds.is_null(), "output must stay untouched on failure");

        let kind = cstr("gaussian-blobs");
        assert_eq!(
            tpn_dataset_generate(kind.as_ptr(), 5, 30, 2, 0.8, 0, ptr::null_mut()),
            TpnStatus::NullPointer
        );
        assert!(msg().contains("out_dataset"));
        assert_eq!(
            tpn_dataset_generate(ptr::null(), 5, 30, 2, 0.8, 0, &mut ds),
            TpnStatus::NullPointer
        );
        assert!(msg().contains("kind"));

        let not_utf8 = c"\xff";
        assert_eq!(
            tpn_dataset_generate(not_utf8.as_ptr(), 5, 30, 2, 0.8, 0, &mut ds),
            TpnStatus::InvalidArgument
        );
        assert!(msg().contains("UTF-8"));

        let missing = cstr("/definitely/not/there.fsds");
        assert_eq!(tpn_dataset_load(missing.as_ptr(), &mut ds), TpnStatus::Data);
        assert!(!msg().is_empty());

        let mut ck: *mut TpnCheckpoint = ptr::null_mut();
        assert_eq!(tpn_checkpoint_load(missing.as_ptr(), &mut ck), TpnStatus::Data);

        let real = generate(5, 3);
        let all = cstr("all");
        let bad_config = cstr("n_way = 1\n");
        assert_eq!(
            tpn_train(real, all.as_ptr(), bad_config.as_ptr(), &mut ck),
            TpnStatus::InvalidArgument
        );
        assert!(msg().contains("n_way"), "message was {:?}", msg());

        let bad_split = cstr("holdout");
        assert_eq!(
            tpn_dataset_restrict(real, bad_split.as_ptr(), &mut ds),
            TpnStatus::InvalidArgument
        );
        assert!(msg().contains("holdout"));

        tpn_dataset_free(real);
        tpn_dataset_free(ptr::null_mut());
        tpn_checkpoint_free(ptr::null_mut());
        tpn_string_free(ptr::null_mut());
    }
}
