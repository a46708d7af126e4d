use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use ctcat_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(ctcat_last_error_message()) }.to_string_lossy().into_owned()
}

fn one_hot(v: usize, hot: usize) -> Vec<f64> {
    (0..v).map(|i| if i == hot { 0.0 } else { -30.0 }).collect()
}

fn new_detector(text: &str, level: u32, te: &[f64], u: usize, d: usize) -> (CtcatStatus, *mut CtcatDetector) {
    let text = CString::new(text).unwrap();
    let mut det = ptr::null_mut();
    let status = unsafe { ctcat_detector_new(text.as_ptr(), level, 6.0, te.as_ptr(), u, d, &mut det) };
    (status, det)
}

#[test]
fn detects_single_token_keyword() {
    let (status, det) = new_detector("a", CTCAT_LEVEL_PHRASE, &[1.0, 0.0], 1, 2);
    assert_eq!(status, CtcatStatus::Ok, "{}", last_error());
    let v = unsafe { ctcat_detector_vocab_len(det) };
    assert_eq!((v, unsafe { ctcat_detector_dim(det) }), (30, 2));

    let mut s = CtcatScore::default();
    for hot in [29, 0, 29] {
        let st = unsafe { ctcat_detector_step(det, one_hot(v, hot).as_ptr(), v, [2.0, 0.0].as_ptr(), 2, &mut s) };
        assert_eq!(st, CtcatStatus::Ok);
    }
    assert!(s.valid);
    assert_eq!((s.t, s.z_ctc, s.z_embed, s.z), (3, 0.0, 1.0, 6.0));
    assert_eq!(last_error(), "");

    assert_eq!(unsafe { ctcat_detector_reset(det) }, CtcatStatus::Ok);
    let st = unsafe { ctcat_detector_step(det, one_hot(v, 29).as_ptr(), v, [2.0, 0.0].as_ptr(), 2, &mut s) };
    assert_eq!(st, CtcatStatus::Ok);
    assert_eq!((s.t, s.valid), (1, false));
    unsafe { ctcat_detector_free(det) };
}

#[test]
fn reports_errors() {
    let (status, det) = new_detector("cat", CTCAT_LEVEL_WORD, &[0.0; 4], 2, 2);
    assert_eq!(status, CtcatStatus::InvalidArgument);
    assert!(det.is_null());
    assert!(last_error().contains("3"), "{}", last_error());

    let (status, _) = new_detector("c4t", CTCAT_LEVEL_WORD, &[0.0; 6], 3, 2);
    assert_eq!(status, CtcatStatus::Vocabulary);

    let (status, _) = new_detector("a", 9, &[1.0], 1, 1);
    assert_eq!(status, CtcatStatus::InvalidArgument);

    let mut det = ptr::null_mut();
    assert_eq!(
        unsafe { ctcat_detector_new(ptr::null(), 0, 6.0, [1.0].as_ptr(), 1, 1, &mut det) },
        CtcatStatus::NullPointer
    );

    let path = CString::new("/nonexistent/enrollment.json").unwrap();
    assert_eq!(
        unsafe { ctcat_detector_new_from_enrollment(path.as_ptr(), &mut det) },
        CtcatStatus::Io
    );

    let (status, det) = new_detector("a", CTCAT_LEVEL_CHARACTER, &[1.0], 1, 1);
    assert_eq!(status, CtcatStatus::Ok);
    let mut s = CtcatScore::default();
    let lp = one_hot(30, 0);
    assert_eq!(
        unsafe { ctcat_detector_step(det, lp.as_ptr(), 29, [0.0].as_ptr(), 1, &mut s) },
        CtcatStatus::DimensionMismatch
    );
    assert_eq!(
        unsafe { ctcat_detector_step(det, ptr::null(), 30, [0.0].as_ptr(), 1, &mut s) },
        CtcatStatus::NullPointer
    );
    unsafe { ctcat_detector_free(det) };
    unsafe { ctcat_detector_free(ptr::null_mut()) };
    assert_eq!(unsafe { ctcat_detector_vocab_len(ptr::null()) }, 0);
}

#[test]
fn loads_enrollment_documents() {
    let vocab = ctcat::Vocabulary::english();
    let (_, doc) = ctcat::enroll(
        &vocab,
        "hi",
        vec![vec![1.0], vec![-1.0]],
        ctcat::Level::Character,
        6.0,
        Default::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hi.json");
    doc.write(&path).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut det = ptr::null_mut();
    assert_eq!(
        unsafe { ctcat_detector_new_from_enrollment(c.as_ptr(), &mut det) },
        CtcatStatus::Ok,
        "{}",
        last_error()
    );
    assert_eq!(unsafe { ctcat_detector_dim(det) }, 1);
    unsafe { ctcat_detector_free(det) };

    std::fs::write(&path, "{ not json").unwrap();
    assert_eq!(
        unsafe { ctcat_detector_new_from_enrollment(c.as_ptr(), &mut det) },
        CtcatStatus::Format
    );
}

#[test]
fn version_matches_crate() {
    let v = unsafe { CStr::from_ptr(ctcat_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_current_and_usable_from_c() {
    let crate_dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(crate_dir.join("include/ctcat.h")).unwrap();
    for sym in [
        "ctcat_detector_new",
        "ctcat_detector_step",
        "ctcat_detector_free",
        "ctcat_last_error_message",
        "CTCAT_STATUS_OK",
        "typedef struct CtcatDetector CtcatDetector",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }

    // target/<profile>/deps/<test binary>
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libctcat_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping C link check (no cc or {} missing)", lib.display());
        return;
    }
    let out = tempfile::tempdir().unwrap();
    let bin = out.path().join("smoke");
    let status = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir.join("include"))
        .arg(crate_dir.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C smoke program failed to compile");
    let run = Command::new(&bin).output().unwrap();
    assert!(
        run.status.success(),
        "C smoke program exited with {:?}: {}",
        run.status,
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
