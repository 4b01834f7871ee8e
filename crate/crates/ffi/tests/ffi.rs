use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use onerec::harness::commands::{self as cmd, RunContext};
use onerec::harness::config::RunConfig;
use onerec_ffi::*;

fn small_run(dir: &Path, with_rm: bool) {
    let mut cfg = RunConfig::default();
    cfg.simulator.num_items = 200;
    cfg.simulator.num_clusters = 8;
    cfg.simulator.num_users = 30;
    cfg.simulator.held_out_users = 5;
    cfg.simulator.sessions_per_user = 2;
    cfg.tokenizer.codebook_size = 8;
    cfg.model.codebook_size = 8;
    cfg.model.d_model = 16;
    cfg.seed_train.steps = 5;
    cfg.reward_train.steps = 5;
    let path = dir.join("in.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    let ctx = RunContext::resolve(&dir.join("run"), Some(&path), None, false).unwrap();
    cmd::simulate(&ctx).unwrap();
    cmd::fit_tokenizer_cmd(&ctx).unwrap();
    cmd::train_seed(&ctx, |_, _| {}).unwrap();
    if with_rm {
        cmd::train_rm(&ctx).unwrap();
    }
}

fn c(s: &Path) -> CString {
    CString::new(s.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe {
        onerec_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn open(dir: &Path) -> *mut OnerecRecommender {
    let mut h = ptr::null_mut();
    let s = unsafe { onerec_recommender_open(c(&dir.join("run")).as_ptr(), ptr::null(), &mut h) };
    assert_eq!(s, OnerecStatus::Ok, "{}", last_error());
    h
}

#[test]
fn generate_and_score_through_the_c_abi() {
    let dir = tempfile::tempdir().unwrap();
    small_run(dir.path(), true);
    let h = open(dir.path());
    unsafe {
        let m = onerec_session_size(h);
        assert_eq!(m, 5);
        assert_eq!(onerec_catalog_size(h), 200);
        let history = [3u32, 17, 42];
        let mut items = vec![u32::MAX; 4 * m];
        let mut lps = [0.0f64; 4];
        let mut n = 0usize;
        let s = onerec_generate(h, history.as_ptr(), 3, 4, items.as_mut_ptr(), items.len(), lps.as_mut_ptr(), &mut n);
        assert_eq!(s, OnerecStatus::Ok, "{}", last_error());
        assert!((1..=4).contains(&n));
        assert!(items[..n * m].iter().all(|&i| i < 200));
        assert!(lps[..n].windows(2).all(|w| w[0] >= w[1]));

        let mut targets = [0.0f64; 4];
        let mut score = -1.0;
        let s = onerec_score(h, history.as_ptr(), 3, items.as_ptr(), m, targets.as_mut_ptr(), &mut score);
        assert_eq!(s, OnerecStatus::Ok, "{}", last_error());
        assert!(targets.iter().all(|&t| t > 0.0 && t < 1.0));
        assert!((score - targets.iter().sum::<f64>() / 4.0).abs() < 1e-12);

        let s = onerec_generate(h, ptr::null(), 0, 2, items.as_mut_ptr(), items.len(), ptr::null_mut(), &mut n);
        assert_eq!(s, OnerecStatus::Ok, "{}", last_error());
        onerec_recommender_free(h);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut h = ptr::null_mut();
        let s = onerec_recommender_open(c(dir.path()).as_ptr(), ptr::null(), &mut h);
        assert_eq!(s, OnerecStatus::MissingArtifact);
        assert!(h.is_null());
        assert!(last_error().contains("config.toml"));
        assert_eq!(onerec_recommender_open(ptr::null(), ptr::null(), &mut h), OnerecStatus::NullArgument);
        assert_eq!(CStr::from_ptr(onerec_status_name(OnerecStatus::Integrity)).to_str().unwrap(), "integrity failure");
        assert_eq!(onerec_session_size(ptr::null()), 0);
        onerec_recommender_free(ptr::null_mut());
    }

    small_run(dir.path(), false);
    let h = open(dir.path());
    unsafe {
        let m = onerec_session_size(h);
        let mut items = vec![0u32; 2 * m];
        let mut n = 7usize;
        let history = [1u32];
        let s = onerec_generate(h, history.as_ptr(), 1, 3, items.as_mut_ptr(), items.len(), ptr::null_mut(), &mut n);
        assert_eq!(s, OnerecStatus::BufferTooSmall);
        assert_eq!(n, 0);
        let bad = [10_000u32];
        let s = onerec_generate(h, bad.as_ptr(), 1, 2, items.as_mut_ptr(), items.len(), ptr::null_mut(), &mut n);
        assert_eq!(s, OnerecStatus::InvalidArgument);
        assert!(!last_error().is_empty());
        let mut t = [0.0; 4];
        let s = onerec_score(h, history.as_ptr(), 1, items.as_ptr(), m, t.as_mut_ptr(), ptr::null_mut());
        assert_eq!(s, OnerecStatus::NoRewardModel);
        onerec_recommender_free(h);
    }

    let ckpt = dir.path().join("run").join("seed.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let k = bytes.len() / 2;
    bytes[k] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    let mut h = ptr::null_mut();
    let s = unsafe { onerec_recommender_open(c(&dir.path().join("run")).as_ptr(), ptr::null(), &mut h) };
    assert_eq!(s, OnerecStatus::Integrity);
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/onerec.h")).unwrap();
    for name in [
        "onerec_recommender_open",
        "onerec_recommender_free",
        "onerec_generate",
        "onerec_score",
        "onerec_session_size",
        "onerec_catalog_size",
        "onerec_last_error",
        "onerec_status_name",
        "ONEREC_STATUS_INTEGRITY",
        "typedef struct OnerecRecommender OnerecRecommender",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"onerec.h\"\nint main(void) { OnerecRecommender *h = 0; size_t n = onerec_session_size(h); return (int)n + (int)ONEREC_STATUS_OK; }\n",
    )
    .unwrap();
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(include)
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
